import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from promptseg.datasets import synth_dataset
from promptseg.model import save_checkpoint
from promptseg.service import (
    AppState,
    create_app,
    image_from_b64,
    image_to_b64,
    load_state,
    rle_decode,
    rle_encode,
)

from helpers import tiny_model


# ---------------------------------------------------------------------------
# RLE wire format

def test_rle_all_background():
    mask = np.zeros((4, 5), dtype=bool)
    assert rle_encode(mask) == [20]


def test_rle_all_foreground_starts_with_zero_run():
    mask = np.ones((4, 5), dtype=bool)
    assert rle_encode(mask) == [0, 20]


def test_rle_single_pixel():
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 1] = True  # row-major position 4
    assert rle_encode(mask) == [4, 1, 4]


def test_rle_row_major_order():
    mask = np.array([[1, 0], [0, 1]], dtype=bool)
    assert rle_encode(mask) == [0, 1, 2, 1]


def test_rle_decode_rejects_wrong_total():
    with pytest.raises(ValueError, match="sum"):
        rle_decode([3, 1], (2, 3))


def test_rle_decode_rejects_negative():
    with pytest.raises(ValueError, match="non-negative"):
        rle_decode([-1, 10], (3, 3))


@settings(deadline=None, max_examples=200)
@given(
    bits=st.lists(st.booleans(), min_size=1, max_size=64),
    width=st.integers(min_value=1, max_value=8),
)
def test_rle_round_trip(bits, width):
    height = (len(bits) + width - 1) // width
    padded = bits + [False] * (height * width - len(bits))
    mask = np.array(padded, dtype=bool).reshape(height, width)
    assert np.array_equal(rle_decode(rle_encode(mask), mask.shape), mask)


# The UI client keeps its own decoder; both sides pin the wire format against
# one vector file, checked in twice and required to stay byte-identical.

VECTORS_PY = Path(__file__).parent / "data" / "rle_vectors.json"
VECTORS_TS = Path(__file__).parent.parent / "frontend" / "src" / "__tests__" / "rle_vectors.json"


def test_shared_vector_files_are_byte_identical():
    assert VECTORS_PY.read_bytes() == VECTORS_TS.read_bytes()


def test_shared_vectors_match_encoder_and_decoder():
    doc = json.loads(VECTORS_PY.read_text())
    assert len(doc["vectors"]) >= 9
    for vec in doc["vectors"]:
        shape = tuple(vec["shape"])
        mask = np.array([c == "1" for c in vec["pixels"]], dtype=bool).reshape(shape)
        assert rle_encode(mask) == vec["rle"], vec["name"]
        assert np.array_equal(rle_decode(vec["rle"], shape), mask), vec["name"]


def test_image_b64_round_trip():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(32, 32)).astype(np.float32) / 255.0
    decoded = image_from_b64(image_to_b64(image))
    assert decoded.shape == (32, 32)
    assert np.allclose(decoded, image, atol=1e-6)


# ---------------------------------------------------------------------------
# service fixtures

N_IMAGES = 6  # two structures per image -> 12 slices


@pytest.fixture(scope="module")
def service_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    synth_dataset(N_IMAGES, 32, seed=21, root=root)
    ckpt = tmp_path_factory.mktemp("ck") / "ckpt_0"
    save_checkpoint(tiny_model(seed=4), ckpt, extra={"ablation": "full"})
    return {"root": root, "ckpt": ckpt}


@pytest.fixture(scope="module")
def client(service_env):
    state = load_state(checkpoint=str(service_env["ckpt"]),
                       datasets={"synth": str(service_env["root"])})
    app = create_app(state, cors_origins=("http://localhost:5173",))
    return TestClient(app, raise_server_exceptions=False)


@pytest.fixture()
def bare_client():
    return TestClient(create_app(AppState()), raise_server_exceptions=False)


def first_slice_id(client) -> str:
    return client.get("/v1/slices", params={"dataset": "synth"}).json()["slices"][0]["id"]


def seg_request(slice_id, **overrides) -> dict:
    body = {
        "image_ref": {"dataset": "synth", "slice_id": slice_id},
        "text": "segment the circle",
    }
    body.update(overrides)
    return body


# ---------------------------------------------------------------------------
# /v1/model

def test_model_info(client):
    r = client.get("/v1/model")
    assert r.status_code == 200
    doc = r.json()
    assert doc["ablation"] == "full"
    assert len(doc["config_hash"]) == 12
    assert doc["image_size"] == 32
    assert set(doc["supported_prompts"]) == {"points", "boxes", "text", "silent"}
    assert doc["parameters"] > 0


def test_model_info_409_before_load(bare_client):
    r = bare_client.get("/v1/model")
    assert r.status_code == 409
    assert r.json()["code"] == "model_not_loaded"


def test_config_hash_stable_across_restarts(service_env, client):
    state = load_state(checkpoint=str(service_env["ckpt"]),
                       datasets={"synth": str(service_env["root"])})
    reborn = TestClient(create_app(state), raise_server_exceptions=False)
    a = client.get("/v1/model").json()
    b = reborn.get("/v1/model").json()
    assert a["config_hash"] == b["config_hash"]
    assert a["checkpoint_id"] == b["checkpoint_id"]


# ---------------------------------------------------------------------------
# /v1/slices

def test_listing_total(client):
    doc = client.get("/v1/slices", params={"dataset": "synth"}).json()
    assert doc["total"] == 2 * N_IMAGES
    assert len(doc["slices"]) == 2 * N_IMAGES
    entry = doc["slices"][0]
    assert set(entry) == {"id", "organ_id", "split", "has_reference"}
    assert entry["has_reference"] is True


def test_listing_pagination(client):
    page = client.get("/v1/slices",
                      params={"dataset": "synth", "offset": 10, "limit": 5}).json()
    assert page["total"] == 12
    assert len(page["slices"]) == 2


def test_listing_beyond_end_is_empty_page(client):
    page = client.get("/v1/slices",
                      params={"dataset": "synth", "offset": 999}).json()
    assert page["slices"] == []
    assert page["total"] == 12


def test_listing_stable_order(client):
    a = client.get("/v1/slices", params={"dataset": "synth"}).json()
    b = client.get("/v1/slices", params={"dataset": "synth"}).json()
    assert a == b
    ids = [s["id"] for s in a["slices"]]
    assert ids == sorted(ids)


def test_listing_unknown_dataset_404(client):
    r = client.get("/v1/slices", params={"dataset": "nope"})
    assert r.status_code == 404
    assert r.json() == {"code": "not_found",
                        "message": "unknown dataset 'nope'",
                        "field": "dataset"}


def test_listing_requires_dataset_param(client):
    r = client.get("/v1/slices")
    assert r.status_code == 400
    assert r.json()["code"] == "invalid_request"
    assert r.json()["field"] == "query.dataset"


def test_listing_rejects_negative_offset(client):
    r = client.get("/v1/slices", params={"dataset": "synth", "offset": -1})
    assert r.status_code == 400


def test_slice_detail(client):
    slice_id = first_slice_id(client)
    r = client.get(f"/v1/slices/{slice_id}", params={"dataset": "synth"})
    assert r.status_code == 200
    doc = r.json()
    assert doc["id"] == slice_id
    assert doc["shape"] == [32, 32]
    assert doc["has_reference"] is True
    assert doc["organ_name"] in doc["text_prompt"]
    image = image_from_b64(doc["image_b64"])
    assert image.shape == (32, 32)


def test_slice_detail_unknown_404(client):
    r = client.get("/v1/slices/circle/missing.npz", params={"dataset": "synth"})
    assert r.status_code == 404
    assert r.json()["field"] == "slice_id"


# ---------------------------------------------------------------------------
# /v1/segment

def test_segment_text_only(client):
    slice_id = first_slice_id(client)
    r = client.post("/v1/segment", json=seg_request(slice_id))
    assert r.status_code == 200
    doc = r.json()
    assert doc["mask"]["shape"] == [32, 32]
    mask = rle_decode(doc["mask"]["rle"], doc["mask"]["shape"])
    assert mask.shape == (32, 32)
    assert isinstance(doc["dsc_vs_reference"], float)
    assert 0.0 <= doc["dsc_vs_reference"] <= 1.0
    assert doc["timing_ms"] > 0
    assert doc["model_info"]["config_hash"] == client.get("/v1/model").json()["config_hash"]


def test_segment_deterministic_modulo_timing(client):
    body = seg_request(first_slice_id(client),
                       points=[{"x": 10, "y": 12, "label": "positive"}])
    a = client.post("/v1/segment", json=body).json()
    b = client.post("/v1/segment", json=body).json()
    assert a["mask"] == b["mask"]
    a.pop("timing_ms"), b.pop("timing_ms")
    assert a == b


def test_segment_box_prompt(client):
    body = seg_request(first_slice_id(client), text=None,
                       boxes=[{"x0": 4, "y0": 4, "x1": 20, "y1": 20}])
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 200


def test_segment_inline_image_has_no_reference_score(client):
    slice_id = first_slice_id(client)
    detail = client.get(f"/v1/slices/{slice_id}", params={"dataset": "synth"}).json()
    body = seg_request(None, image_ref={"image_b64": detail["image_b64"]})
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 200
    doc = r.json()
    assert doc["dsc_vs_reference"] is None
    assert doc["mask"]["shape"] == [32, 32]


def test_segment_threshold_extremes(client):
    slice_id = first_slice_id(client)
    sky_high = client.post("/v1/segment",
                           json=seg_request(slice_id, threshold=1e9)).json()
    assert sky_high["mask"]["rle"] == [32 * 32]
    rock_bottom = client.post("/v1/segment",
                              json=seg_request(slice_id, threshold=-1e9)).json()
    assert rock_bottom["mask"]["rle"] == [0, 32 * 32]


def test_segment_no_prompts_400(client):
    body = seg_request(first_slice_id(client), text=None)
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "allow_silent"


def test_segment_empty_text_is_no_prompt(client):
    body = seg_request(first_slice_id(client), text="   ")
    assert client.post("/v1/segment", json=body).status_code == 400


def test_segment_allow_silent(client):
    body = seg_request(first_slice_id(client), text=None, allow_silent=True)
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 200


def test_segment_point_out_of_bounds_400(client):
    body = seg_request(first_slice_id(client),
                       points=[{"x": 40.5, "y": 3, "label": "positive"}])
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "points[0].x"


def test_segment_bad_label_400(client):
    body = seg_request(first_slice_id(client),
                       points=[{"x": 4, "y": 3, "label": "maybe"}])
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "points[0].label"


def test_segment_degenerate_box_400(client):
    body = seg_request(first_slice_id(client),
                       boxes=[{"x0": 20, "y0": 4, "x1": 10, "y1": 8}])
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "boxes[0]"
    assert "degenerate" in r.json()["message"]


def test_segment_unknown_dataset_404(client):
    body = seg_request(None, image_ref={"dataset": "nope", "slice_id": "x"})
    assert client.post("/v1/segment", json=body).status_code == 404


def test_segment_unknown_slice_404(client):
    body = seg_request(None, image_ref={"dataset": "synth", "slice_id": "gone.npz"})
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 404
    assert r.json()["field"] == "slice_id"


def test_segment_ambiguous_image_ref_400(client):
    slice_id = first_slice_id(client)
    detail = client.get(f"/v1/slices/{slice_id}", params={"dataset": "synth"}).json()
    body = seg_request(None, image_ref={
        "image_b64": detail["image_b64"], "dataset": "synth", "slice_id": slice_id,
    })
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "image_ref"


def test_segment_bad_base64_400(client):
    body = seg_request(None, image_ref={"image_b64": "@@not-base64@@"})
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "image_ref.image_b64"


def test_segment_wrong_size_inline_400(client):
    tiny = image_to_b64(np.zeros((16, 16), dtype=np.float32))
    body = seg_request(None, image_ref={"image_b64": tiny})
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert "32x32" in r.json()["message"]


def test_segment_unknown_body_field_400(client):
    body = seg_request(first_slice_id(client))
    body["txt"] = "typo"
    r = client.post("/v1/segment", json=body)
    assert r.status_code == 400
    assert r.json()["field"] == "txt"


def test_segment_409_before_load(bare_client):
    r = bare_client.post("/v1/segment", json=seg_request("x"))
    assert r.status_code == 409


def test_internal_error_is_opaque_500(service_env):
    state = load_state(checkpoint=str(service_env["ckpt"]),
                       datasets={"synth": str(service_env["root"])})

    def explode(*args, **kwargs):
        raise RuntimeError("secret internals")

    state.model.segment = explode
    broken = TestClient(create_app(state), raise_server_exceptions=False)
    slice_id = "circle/synth21_0000_0.npz"
    listing = broken.get("/v1/slices", params={"dataset": "synth"}).json()
    body = seg_request(listing["slices"][0]["id"])
    r = broken.post("/v1/segment", json=body)
    assert r.status_code == 500
    doc = r.json()
    assert doc["code"] == "internal"
    assert "secret internals" not in doc["message"]
    assert "id" in doc["message"]


# ---------------------------------------------------------------------------
# reload

def test_reload_disabled_403(client):
    r = client.post("/v1/admin/reload", json={"checkpoint": "whatever"})
    assert r.status_code == 403
    assert r.json()["code"] == "reload_disabled"


def test_reload_swaps_checkpoint(service_env, tmp_path):
    other = tmp_path / "ckpt_other"
    save_checkpoint(tiny_model(seed=9), other, extra={"ablation": "no_text"})
    state = load_state(checkpoint=str(service_env["ckpt"]),
                       datasets={"synth": str(service_env["root"])},
                       allow_reload=True)
    c = TestClient(create_app(state), raise_server_exceptions=False)
    before = c.get("/v1/model").json()
    r = c.post("/v1/admin/reload", json={"checkpoint": str(other)})
    assert r.status_code == 200
    after = c.get("/v1/model").json()
    assert after["checkpoint_id"] != before["checkpoint_id"]
    assert after["ablation"] == "no_text"


def test_reload_missing_checkpoint_404(service_env):
    state = load_state(checkpoint=str(service_env["ckpt"]), allow_reload=True)
    c = TestClient(create_app(state), raise_server_exceptions=False)
    r = c.post("/v1/admin/reload", json={"checkpoint": "/nonexistent/ckpt"})
    assert r.status_code == 404
