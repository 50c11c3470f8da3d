"""REST service exposing preprocessed cases and what-if predictions.

The frontend talks to this API only: it lists cases, pulls 8-bit slice
rasters for display, and posts treatment metadata to get a counterfactual
lesion prediction. Predictions are cached per (case, metadata) so slider
scrubbing in the UI stays cheap.
"""
from __future__ import annotations

import base64
import json
from collections import OrderedDict
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .evaluate import predict_with_metadata, volume_ml
from .network import Model, load_weights
from .perfusion import Aif, DeconvConfig, PerfusionMaps, deconvolve, extract_concentration
from .phantom import TreatmentMetadata
from .preprocess import PreprocessedCase, load_preprocessed
from .training import TrainingCase, make_training_case


class MetadataIn(BaseModel):
    onset_to_ctp_min: float = Field(ge=0.0, le=24 * 60.0)
    ctp_to_recan_min: float = Field(ge=0.0, le=24 * 60.0)
    mtici: Literal["0", "1", "2a", "2b", "3"]
    occluded_at_24h: bool

    def to_domain(self) -> TreatmentMetadata:
        return TreatmentMetadata(
            onset_to_ctp_min=self.onset_to_ctp_min,
            ctp_to_recan_min=self.ctp_to_recan_min,
            mtici=self.mtici,
            occluded_at_24h=self.occluded_at_24h,
        )


class PredictIn(BaseModel):
    case_id: str
    metadata: MetadataIn
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


SLICE_CHANNELS = ("mean", "cbf", "tmax", "cbv", "gt", "mask")


class _CaseEntry:
    """Lazily materialized per-case state."""

    def __init__(self, case_dir: Path):
        self.case_dir = case_dir
        self.pre: PreprocessedCase = load_preprocessed(case_dir)
        self.meta = TreatmentMetadata.from_dict(
            json.loads((case_dir / "meta.json").read_text())
        )
        self._maps: PerfusionMaps | None = None
        self._training: TrainingCase | None = None

    @property
    def case_id(self) -> str:
        return self.pre.case_id

    @property
    def shape(self):
        return self.pre.ctp.grid.shape

    @property
    def spacing(self):
        return self.pre.ctp.grid.spacing

    def training_case(self, spec) -> TrainingCase:
        if self._training is None:
            self._training = make_training_case(self.pre, spec)
        return self._training

    def maps(self) -> PerfusionMaps:
        if self._maps is None:
            doc = json.loads((self.case_dir / "aif.json").read_text())
            aif = Aif(np.asarray(doc["times_s"]), np.asarray(doc["values_hu"]))
            conc = extract_concentration(self.pre.ctp, self.pre.mask)
            self._maps = deconvolve(conc, aif, DeconvConfig(), self.pre.mask).maps
        return self._maps

    def channel(self, name: str) -> tuple[np.ndarray, float, float]:
        """Return (volume, window_lo, window_hi) for display scaling."""
        if name == "mean":
            return self.pre.ctp.data.mean(axis=-1), 0.0, 80.0
        if name == "gt":
            return self.pre.infarct_gt.data, 0.0, 1.0
        if name == "mask":
            return self.pre.mask.astype(np.float64), 0.0, 1.0
        maps = self.maps()
        if name == "cbf":
            v = maps.cbf.data
            return v, 0.0, max(float(np.percentile(v[self.pre.mask], 99)), 1e-6)
        if name == "tmax":
            return maps.tmax.data, 0.0, 12.0
        if name == "cbv":
            v = maps.cbv.data
            return v, 0.0, max(float(np.percentile(v[self.pre.mask], 99)), 1e-6)
        raise KeyError(name)


def _raster_b64(plane: np.ndarray, lo: float, hi: float) -> str:
    scaled = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    return base64.b64encode((scaled * 255).astype(np.uint8).tobytes()).decode()


class PredictionCache:
    """Tiny LRU keyed by the full prediction request."""

    def __init__(self, maxsize: int = 64):
        self.maxsize = maxsize
        self._store: OrderedDict = OrderedDict()

    def get(self, key):
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        return None

    def put(self, key, value):
        self._store[key] = value
        self._store.move_to_end(key)
        while len(self._store) > self.maxsize:
            self._store.popitem(last=False)


class ServiceState:
    def __init__(self, data_dir, model_path=None):
        self.data_dir = Path(data_dir)
        self.cases: dict[str, _CaseEntry] = {}
        for case_dir in sorted(self.data_dir.iterdir()):
            if (case_dir / "preproc.json").exists():
                entry = _CaseEntry(case_dir)
                self.cases[entry.case_id] = entry
        self.model: Model | None = None
        if model_path is not None:
            self.model = load_weights(model_path)
        self.cache = PredictionCache()

    def entry(self, case_id: str) -> _CaseEntry:
        if case_id not in self.cases:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")
        return self.cases[case_id]


def create_app(data_dir, model_path=None, frontend_dir=None) -> FastAPI:
    state = ServiceState(data_dir, model_path)
    app = FastAPI(title="ctpredict explorer API")
    app.state.service = state

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "n_cases": len(state.cases),
            "model": None if state.model is None else {
                "variant": state.model.variant,
                "t_frames": state.model.t_frames,
                "step": state.model.step,
            },
        }

    @app.get("/api/cases")
    def list_cases():
        out = []
        for entry in state.cases.values():
            truth = entry.pre.infarct_gt.data > 0.5
            out.append(
                {
                    "case_id": entry.case_id,
                    "shape": list(entry.shape),
                    "spacing_mm": list(entry.spacing),
                    "n_frames": entry.pre.ctp.n_frames,
                    "metadata": entry.meta.to_dict(),
                    "true_lesion_ml": round(volume_ml(truth, entry.spacing), 3),
                }
            )
        return {"cases": out}

    @app.get("/api/cases/{case_id}/slice/{z}")
    def get_slice(case_id: str, z: int, channel: str = "mean"):
        entry = state.entry(case_id)
        nz = entry.shape[2]
        if not 0 <= z < nz:
            raise HTTPException(status_code=404, detail=f"slice {z} outside 0..{nz - 1}")
        if channel not in SLICE_CHANNELS:
            raise HTTPException(
                status_code=422,
                detail=f"unknown channel {channel!r}; options: {sorted(SLICE_CHANNELS)}",
            )
        vol, lo, hi = entry.channel(channel)
        plane = np.asarray(vol[:, :, z], dtype=np.float64)
        return {
            "case_id": case_id,
            "z": z,
            "channel": channel,
            "width": plane.shape[1],
            "height": plane.shape[0],
            "window": [lo, hi],
            # row-major over (x, y): height rows of width values
            "data_b64": _raster_b64(plane, lo, hi),
        }

    @app.post("/api/predict")
    def predict(body: PredictIn):
        if state.model is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        entry = state.entry(body.case_id)
        meta = body.metadata.to_domain()
        key = (
            body.case_id,
            meta.onset_to_ctp_min,
            meta.ctp_to_recan_min,
            meta.mtici,
            meta.occluded_at_24h,
            body.threshold,
        )
        cached = state.cache.get(key)
        if cached is not None:
            return cached
        tcase = entry.training_case(state.model.spec)
        prob = predict_with_metadata(state.model, tcase, meta)
        mask = entry.pre.mask
        prob = prob * mask
        binary = (prob >= body.threshold) & mask
        slices = [
            _raster_b64(np.asarray(prob[:, :, z], dtype=np.float64), 0.0, 1.0)
            for z in range(entry.shape[2])
        ]
        response = {
            "case_id": body.case_id,
            "threshold": body.threshold,
            "predicted_ml": round(volume_ml(binary, entry.spacing), 3),
            "expected_ml": round(volume_ml(prob, entry.spacing), 3),
            "shape": list(entry.shape),
            "width": int(entry.shape[1]),
            "height": int(entry.shape[0]),
            "prob_slices_b64": slices,
        }
        state.cache.put(key, response)
        return response

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="frontend")

    return app
