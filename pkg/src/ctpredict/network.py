"""Voxelwise fate prediction network assembled from four input pathways.

Two image pathways (full resolution and a 3x in-plane downsampled context
view) see the tissue time series with time as the channel axis; a third
encodes the arterial curve; the fourth injects per-case scalar covariates.
Pathway outputs are concatenated per voxel and reduced by three 1x1x1
convolutions to a per-voxel probability.

All parameters live in one flat vector with named segments, so optimizers,
serialization and finite-difference checks never deal with layer objects.
The whole network is fully convolutional: any output shape whose in-plane
size is a multiple of 3 can be produced by feeding correspondingly larger
inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

# receptive-field margins of the image pathways (valid convolutions)
MARGIN_XY = 6  # per side: three 3x3x1 plus three 3x3x3 layers
MARGIN_Z = 3
LO_FACTOR = 3
OUT_SHAPE = (21, 21, 5)
HI_SHAPE = (33, 33, 11)
LO_SHAPE = (19, 19, 11)


@dataclass(frozen=True)
class VariantSpec:
    hires: bool = True
    lores: bool = True
    aif: bool = True
    one_voxel: bool = False
    meta: str = "full"  # full | binary | no_onset | no_recan
    tissue_input: str = "native"  # native | smoothed | irf
    lti_augment: bool = True

    @property
    def meta_dim(self) -> int:
        return 3 if self.meta in ("no_onset", "no_recan") else 4


VARIANTS: dict[str, VariantSpec] = {
    "proposed": VariantSpec(),
    "proposed_smoothed": VariantSpec(tissue_input="smoothed"),
    "proposed_deconvolved": VariantSpec(
        aif=False, tissue_input="irf", lti_augment=False
    ),
    "one_voxel": VariantSpec(lores=False, one_voxel=True),
    "no_hires": VariantSpec(hires=False),
    "no_lores": VariantSpec(lores=False),
    "binary_mtici": VariantSpec(meta="binary"),
    "no_onset_time": VariantSpec(meta="no_onset"),
    "no_recan_time": VariantSpec(meta="no_recan"),
}


def _pathway_layers(prefix, t_frames, widths, one_voxel):
    c1, c2 = widths["path1"], widths["path2"]
    if one_voxel:
        plan = [(t_frames, c1, (1, 1, 1)), (c1, c1, (1, 1, 1)), (c1, c1, (1, 1, 1))]
    else:
        plan = [
            (t_frames, c1, (3, 3, 1)),
            (c1, c1, (3, 3, 1)),
            (c1, c1, (3, 3, 1)),
            (c1, c2, (3, 3, 3)),
            (c2, c2, (3, 3, 3)),
            (c2, c2, (3, 3, 3)),
        ]
    return [
        {"name": f"{prefix}{i}", "cin": cin, "cout": cout, "k": k, "bn": True}
        for i, (cin, cout, k) in enumerate(plan)
    ]


def _aif_layers(t_frames, widths):
    ca = widths["aif"]
    return [
        {"name": f"aif{i}", "cin": cin, "cout": cout, "k": (1, 1, 1), "bn": True}
        for i, (cin, cout) in enumerate([(t_frames, ca), (ca, ca)])
    ]


def _head_layers(concat_ch, widths):
    ch = widths["head"]
    return [
        {"name": "head0", "cin": concat_ch, "cout": ch, "k": (1, 1, 1), "bn": True},
        {"name": "head1", "cin": ch, "cout": ch, "k": (1, 1, 1), "bn": True},
        {"name": "head2", "cin": ch, "cout": 1, "k": (1, 1, 1), "bn": False},
    ]


DEFAULT_WIDTHS = {"path1": 48, "path2": 64, "aif": 48, "head": 150}


@dataclass(eq=False)
class Model:
    """Network weights plus enough structure to run and serialize them."""

    variant: str
    t_frames: int
    spec: VariantSpec
    widths: dict
    params: np.ndarray
    running: np.ndarray
    param_segments: dict = field(repr=False)
    running_segments: dict = field(repr=False)
    step: int = 0

    def seg(self, name: str) -> np.ndarray:
        sl, shape = self.param_segments[name]
        return self.params[sl].reshape(shape)

    def run_seg(self, name: str) -> np.ndarray:
        sl, shape = self.running_segments[name]
        return self.running[sl].reshape(shape)

    @property
    def param_count(self) -> int:
        return int(self.params.size)

    # ---- structure ------------------------------------------------------
    def _groups(self):
        groups = []
        s, t, w = self.spec, self.t_frames, self.widths
        if s.hires or s.one_voxel:
            groups.append(("hi", _pathway_layers("hi", t, w, s.one_voxel)))
        if s.lores:
            groups.append(("lo", _pathway_layers("lo", t, w, False)))
        if s.aif:
            groups.append(("aif", _aif_layers(t, w)))
        concat = self.concat_channels
        groups.append(("head", _head_layers(concat, w)))
        return groups

    @property
    def concat_channels(self) -> int:
        s, w = self.spec, self.widths
        ch = 0
        if s.hires or s.one_voxel:
            ch += w["path1"] if s.one_voxel else w["path2"]
        if s.lores:
            ch += w["path2"]
        if s.aif:
            ch += w["aif"]
        return ch + s.meta_dim

    # ---- execution ------------------------------------------------------
    def _run_stack(self, stack, x, training, caches=None, bn_momentum=0.9):
        record = caches is not None
        for layer in stack:
            w = self.seg(layer["name"] + ".w")
            b = self.seg(layer["name"] + ".b")
            x, c_conv = L.conv3d_forward(x, w, b)
            c_bn = c_pr = None
            if layer["bn"]:
                x, c_bn = L.batchnorm_forward(
                    x,
                    self.seg(layer["name"] + ".gamma"),
                    self.seg(layer["name"] + ".beta"),
                    self.run_seg(layer["name"] + ".mean"),
                    self.run_seg(layer["name"] + ".var"),
                    training,
                    momentum=bn_momentum,
                )
                x, c_pr = L.prelu_forward(x, self.seg(layer["name"] + ".alpha"))
            if record:
                caches.append((layer, c_conv, c_bn, c_pr))
        return x

    def _backprop_stack(self, stack_caches, dout, grads):
        for layer, c_conv, c_bn, c_pr in reversed(stack_caches):
            name = layer["name"]
            if layer["bn"]:
                dout, dalpha = L.prelu_backward(dout, c_pr)
                self._acc(grads, name + ".alpha", dalpha)
                dout, dgamma, dbeta = L.batchnorm_backward(dout, c_bn)
                self._acc(grads, name + ".gamma", dgamma)
                self._acc(grads, name + ".beta", dbeta)
            dout, dw, db = L.conv3d_backward(dout, c_conv)
            self._acc(grads, name + ".w", dw)
            self._acc(grads, name + ".b", db)
        return dout

    def _acc(self, grads, name, value):
        sl, shape = self.param_segments[name]
        grads[sl] += value.reshape(-1)

    def forward(
        self, x_hi, x_lo, x_aif, meta, training=False, want_cache=False,
        bn_momentum=0.9,
    ):
        """Compute per-voxel probabilities.

        x_hi (N,T,Xh,Yh,Zh) / x_lo (N,T,Xl,Yl,Zl) for the pathways the
        variant uses (None otherwise); x_aif (N,T); meta (N, meta_dim).
        ``bn_momentum=0`` replaces the running normalization statistics with
        this batch's moments outright (used to re-estimate them at frozen
        weights, so inference matches training even for channels that are
        constant within a case). Returns (probabilities, cache or None).
        """
        s = self.spec
        feats = []
        cache: dict = {"stacks": {}, "order": []}
        groups = dict(self._groups())

        out_shape = None
        if s.hires or s.one_voxel:
            if x_hi is None:
                raise ValueError(f"variant {self.variant} needs the hi-res input")
            st: list = []
            h = self._run_stack(groups["hi"], x_hi, training, st, bn_momentum)
            cache["stacks"]["hi"] = st
            out_shape = h.shape[2:]
            feats.append(h)
            cache["order"].append(("hi", h.shape))
        if s.lores:
            if x_lo is None:
                raise ValueError(f"variant {self.variant} needs the lo-res input")
            st = []
            lo = self._run_stack(groups["lo"], x_lo, training, st, bn_momentum)
            cache["stacks"]["lo"] = st
            lo, c_up = L.upsample_repeat_forward(lo, LO_FACTOR)
            cache["upsample"] = c_up
            if out_shape is not None and lo.shape[2:] != tuple(out_shape):
                raise ValueError(
                    f"pathway shapes disagree: hi {tuple(out_shape)} vs "
                    f"lo {lo.shape[2:]} - check the input geometry"
                )
            out_shape = lo.shape[2:]
            feats.append(lo)
            cache["order"].append(("lo", lo.shape))
        if out_shape is None:
            raise ValueError("at least one image pathway is required")
        if s.aif:
            if x_aif is None:
                raise ValueError(f"variant {self.variant} needs the AIF input")
            st = []
            a = self._run_stack(
                groups["aif"], x_aif.reshape(x_aif.shape + (1, 1, 1)), training,
                st, bn_momentum,
            )
            cache["stacks"]["aif"] = st
            a, c_bc = L.broadcast_spatial_forward(a, out_shape)
            cache["aif_bcast"] = c_bc
            feats.append(a)
            cache["order"].append(("aif", a.shape))
        if meta.shape[1] != s.meta_dim:
            raise ValueError(f"expected {s.meta_dim} metadata scalars, got {meta.shape[1]}")
        m, c_mb = L.broadcast_spatial_forward(meta.astype(feats[0].dtype), out_shape)
        cache["meta_bcast"] = c_mb
        feats.append(m)
        cache["order"].append(("meta", m.shape))

        x = np.concatenate(feats, axis=1)
        st = []
        x = self._run_stack(groups["head"], x, training, st, bn_momentum)
        cache["stacks"]["head"] = st
        prob, c_sig = L.sigmoid_forward(x)
        cache["sigmoid"] = c_sig
        return prob, (cache if want_cache else None)

    def backward(self, dprob, cache) -> np.ndarray:
        """Accumulate parameter gradients for a forward pass ran with
        ``want_cache=True``; returns a flat gradient vector."""
        grads = np.zeros_like(self.params)
        d = L.sigmoid_backward(dprob, cache["sigmoid"])
        d = self._backprop_stack(cache["stacks"]["head"], d, grads)
        # split the concat gradient back into pathway slices
        offset = 0
        for kind, shape in cache["order"]:
            ch = shape[1]
            dpart = d[:, offset : offset + ch]
            offset += ch
            if kind == "hi":
                self._backprop_stack(cache["stacks"]["hi"], dpart, grads)
            elif kind == "lo":
                dlo = L.upsample_repeat_backward(dpart, cache["upsample"])
                self._backprop_stack(cache["stacks"]["lo"], dlo, grads)
            elif kind == "aif":
                da = L.broadcast_spatial_backward(dpart, cache["aif_bcast"])
                self._backprop_stack(cache["stacks"]["aif"], da, grads)
            # metadata carries no parameters
        return grads


def _segment_plan(groups):
    params = []
    running = []
    for _, stack in groups:
        for layer in stack:
            f, c = layer["cout"], layer["cin"]
            kx, ky, kz = layer["k"]
            params.append((layer["name"] + ".w", (f, c, kx, ky, kz)))
            params.append((layer["name"] + ".b", (f,)))
            if layer["bn"]:
                params.append((layer["name"] + ".gamma", (f,)))
                params.append((layer["name"] + ".beta", (f,)))
                params.append((layer["name"] + ".alpha", (f,)))
                running.append((layer["name"] + ".mean", (f,)))
                running.append((layer["name"] + ".var", (f,)))
    return params, running


def _allocate(plan):
    segments = {}
    offset = 0
    for name, shape in plan:
        size = int(np.prod(shape))
        segments[name] = (slice(offset, offset + size), shape)
        offset += size
    return segments, offset


def build_model(
    variant: str,
    t_frames: int,
    seed: int = 0,
    dtype=np.float32,
    widths: dict | None = None,
) -> Model:
    """Construct and He-initialize a model for one experiment variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; options: {sorted(VARIANTS)}")
    if t_frames < 1:
        raise ValueError("t_frames must be >= 1")
    spec = VARIANTS[variant]
    widths = dict(DEFAULT_WIDTHS if widths is None else widths)

    model = Model(
        variant=variant,
        t_frames=t_frames,
        spec=spec,
        widths=widths,
        params=np.empty(0, dtype=dtype),
        running=np.empty(0, dtype=dtype),
        param_segments={},
        running_segments={},
    )
    plan_p, plan_r = _segment_plan(model._groups())
    model.param_segments, n_params = _allocate(plan_p)
    model.running_segments, n_running = _allocate(plan_r)
    model.params = np.zeros(n_params, dtype=dtype)
    model.running = np.zeros(n_running, dtype=dtype)

    rng = np.random.default_rng(seed)
    for name, (sl, shape) in model.param_segments.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            model.params[sl] = rng.uniform(-limit, limit, size=sl.stop - sl.start)
        elif name.endswith(".gamma"):
            model.params[sl] = 1.0
        elif name.endswith(".alpha"):
            model.params[sl] = 0.25
        # biases and betas stay zero
    for name, (sl, shape) in model.running_segments.items():
        if name.endswith(".var"):
            model.running[sl] = 1.0
    return model


MAGIC = b"CTPW"


def save_weights(model: Model, path) -> None:
    header = {
        "variant": model.variant,
        "t_frames": model.t_frames,
        "widths": model.widths,
        "step": model.step,
        "n_params": int(model.params.size),
        "n_running": int(model.running.size),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(model.params.astype(np.float32).tobytes())
        fh.write(model.running.astype(np.float32).tobytes())


def load_weights(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a weight file (bad magic)")
        (hlen,) = np.frombuffer(fh.read(4), dtype=np.uint32)
        header = json.loads(fh.read(int(hlen)).decode())
        model = build_model(
            header["variant"], header["t_frames"], widths=header["widths"]
        )
        payload = fh.read()
    expected = 4 * (header["n_params"] + header["n_running"])
    if len(payload) != expected:
        raise ValueError(
            f"weight payload is {len(payload)} bytes, expected {expected}"
        )
    flat = np.frombuffer(payload, dtype=np.float32)
    model.params = flat[: header["n_params"]].copy()
    model.running = flat[header["n_params"] :].copy()
    model.step = int(header["step"])
    return model
