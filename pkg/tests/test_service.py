"""REST API behavior: listing, rasters, predictions, caching and errors."""
import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ctpredict.evaluate import evaluate_case
from ctpredict.network import VARIANTS, build_model
from ctpredict.phantom import PhantomConfig, generate_case, write_case
from ctpredict.preprocess import PreprocConfig, preprocess_case
from ctpredict.service import create_app
from ctpredict.network import save_weights
from ctpredict.training import make_training_case

MINI_WIDTHS = {"path1": 3, "path2": 4, "aif": 3, "head": 5}


@pytest.fixture(scope="module")
def service_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    data = root / "preprocessed"
    cfg = PhantomConfig()
    pcfg = PreprocConfig(motion_correct=False)
    pres = []
    for seed in (11, 12):
        raw = root / "raw" / f"c{seed}"
        write_case(generate_case(cfg, seed=seed), raw)
        pres.append(preprocess_case(raw, pcfg, data / f"c{seed}"))
    model = build_model("proposed", 30, seed=1, widths=MINI_WIDTHS)
    weights = root / "model.ctpw"
    save_weights(model, weights)
    return {"data": data, "weights": weights, "pres": pres, "model": model}


@pytest.fixture(scope="module")
def client(service_env):
    app = create_app(service_env["data"], service_env["weights"])
    return TestClient(app)


class TestHealthAndListing:
    def test_health(self, client):
        doc = client.get("/api/health").json()
        assert doc["status"] == "ok"
        assert doc["n_cases"] == 2
        assert doc["model"]["variant"] == "proposed"

    def test_cases_listing(self, client):
        doc = client.get("/api/cases").json()
        assert len(doc["cases"]) == 2
        entry = doc["cases"][0]
        assert entry["shape"] == [64, 64, 8]
        assert entry["n_frames"] == 30
        assert set(entry["metadata"]) >= {
            "onset_to_ctp_min", "ctp_to_recan_min", "mtici", "occluded_at_24h",
        }
        assert entry["true_lesion_ml"] > 0


class TestSliceRasters:
    def test_mean_channel_raster(self, client):
        cases = client.get("/api/cases").json()["cases"]
        cid = cases[0]["case_id"]
        doc = client.get(f"/api/cases/{cid}/slice/4", params={"channel": "mean"}).json()
        raw = base64.b64decode(doc["data_b64"])
        assert len(raw) == doc["width"] * doc["height"] == 64 * 64
        vals = np.frombuffer(raw, dtype=np.uint8)
        assert vals.min() >= 0 and vals.max() <= 255 and vals.max() > 0

    @pytest.mark.parametrize("channel", ["gt", "mask", "cbf", "tmax", "cbv"])
    def test_other_channels_round_trip(self, client, channel):
        cid = client.get("/api/cases").json()["cases"][0]["case_id"]
        r = client.get(f"/api/cases/{cid}/slice/3", params={"channel": channel})
        assert r.status_code == 200
        assert len(base64.b64decode(r.json()["data_b64"])) == 64 * 64

    def test_unknown_case_404(self, client):
        assert client.get("/api/cases/nope/slice/0").status_code == 404

    def test_out_of_range_slice_404(self, client):
        cid = client.get("/api/cases").json()["cases"][0]["case_id"]
        assert client.get(f"/api/cases/{cid}/slice/99").status_code == 404

    def test_unknown_channel_422(self, client):
        cid = client.get("/api/cases").json()["cases"][0]["case_id"]
        r = client.get(f"/api/cases/{cid}/slice/0", params={"channel": "doppler"})
        assert r.status_code == 422


def _request(case_id, **overrides):
    body = {
        "case_id": case_id,
        "metadata": {
            "onset_to_ctp_min": 150.0,
            "ctp_to_recan_min": 80.0,
            "mtici": "2b",
            "occluded_at_24h": False,
        },
    }
    body["metadata"].update(overrides)
    return body


class TestPrediction:
    def test_predict_shape_and_volume(self, client):
        cid = client.get("/api/cases").json()["cases"][0]["case_id"]
        doc = client.post("/api/predict", json=_request(cid)).json()
        assert doc["case_id"] == cid
        assert doc["predicted_ml"] >= 0.0
        assert doc["expected_ml"] >= 0.0
        assert len(doc["prob_slices_b64"]) == 8
        raw = base64.b64decode(doc["prob_slices_b64"][0])
        assert len(raw) == 64 * 64

    def test_repeat_requests_are_byte_identical(self, client):
        cid = client.get("/api/cases").json()["cases"][1]["case_id"]
        body = _request(cid, mtici="3")
        a = client.post("/api/predict", json=body)
        b = client.post("/api/predict", json=body)
        assert a.content == b.content

    def test_metadata_sweep_changes_volume(self, client):
        cid = client.get("/api/cases").json()["cases"][0]["case_id"]
        best = client.post(
            "/api/predict", json=_request(cid, mtici="3", ctp_to_recan_min=60.0)
        ).json()
        worst = client.post(
            "/api/predict", json=_request(cid, mtici="0", occluded_at_24h=True)
        ).json()
        assert best["expected_ml"] != worst["expected_ml"]

    def test_matches_offline_evaluation(self, client, service_env):
        pre = service_env["pres"][0]
        tcase = make_training_case(pre, VARIANTS["proposed"])
        offline = evaluate_case(
            service_env["model"], tcase, pre.ctp.grid.spacing, threshold=0.5
        )
        body = _request(pre.case_id)
        # use the case's own stored metadata for exact parity
        import json as _json
        stored = _json.loads((pre.case_dir / "meta.json").read_text())
        body["metadata"] = {
            k: stored[k]
            for k in ("onset_to_ctp_min", "ctp_to_recan_min", "mtici", "occluded_at_24h")
        }
        doc = client.post("/api/predict", json=body).json()
        assert doc["predicted_ml"] == pytest.approx(offline.thresholded_ml, abs=1e-3)
        assert doc["expected_ml"] == pytest.approx(offline.predicted_ml, abs=1e-3)

    def test_invalid_metadata_422(self, client):
        cid = client.get("/api/cases").json()["cases"][0]["case_id"]
        assert client.post("/api/predict", json=_request(cid, mtici="4")).status_code == 422
        assert (
            client.post("/api/predict", json=_request(cid, onset_to_ctp_min=-5.0)).status_code
            == 422
        )
        incomplete = _request(cid)
        del incomplete["metadata"]["mtici"]
        assert client.post("/api/predict", json=incomplete).status_code == 422

    def test_unknown_case_404(self, client):
        assert client.post("/api/predict", json=_request("ghost")).status_code == 404

    def test_without_model_503(self, service_env):
        bare = TestClient(create_app(service_env["data"], model_path=None))
        cid = bare.get("/api/cases").json()["cases"][0]["case_id"]
        assert bare.post("/api/predict", json=_request(cid)).status_code == 503
        assert bare.get("/api/health").json()["model"] is None


class TestStaticFrontend:
    def test_index_served_when_present(self, service_env, tmp_path):
        site = tmp_path / "dist"
        site.mkdir()
        (site / "index.html").write_text("<html><body>explorer</body></html>")
        app = create_app(service_env["data"], frontend_dir=site)
        c = TestClient(app)
        r = c.get("/")
        assert r.status_code == 200
        assert "explorer" in r.text
        assert c.get("/api/health").status_code == 200

    def test_missing_frontend_dir_is_ignored(self, service_env, tmp_path):
        app = create_app(service_env["data"], frontend_dir=tmp_path / "nope")
        assert TestClient(app).get("/api/health").status_code == 200
