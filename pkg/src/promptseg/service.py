"""Stateless HTTP inference service: submit an image or a dataset slice plus
any combination of points, boxes, and text; receive a run-length-encoded
mask. Errors are machine-readable {code, message, field?} JSON.

Responses are a pure function of (request, loaded checkpoint); there is no
per-session server state. Requests with no geometric prompt run on the
learned silent embedding, so text-only requests work out of the box.
"""

from __future__ import annotations

import base64
import binascii
import io
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict

from promptseg import metrics
from promptseg.datasets import DatasetManifest, SliceSample, read_archive
from promptseg.errors import PromptError, ShapeError
from promptseg.model import Segmenter, load_checkpoint, weights_fingerprint
from promptseg.prompts import BoxPrompt, PointLabel, PointPrompt

SUPPORTED_PROMPTS = ("points", "boxes", "text", "silent")
MAX_PAGE_SIZE = 500


# ---------------------------------------------------------------------------
# run-length mask wire format

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating and starting with the count of
    zeros (which may be 0 when the mask begins with foreground)."""
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    runs = [] if not flat[0] else [0]
    runs.extend(int(n) for n in lengths)
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    """Inverse of rle_encode. Validates totals so a truncated payload cannot
    silently produce a wrong-sized mask."""
    h, w = int(shape[0]), int(shape[1])
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs):
        raise ValueError(f"run lengths must be non-negative, got {runs}")
    if sum(runs) != h * w:
        raise ValueError(
            f"run lengths sum to {sum(runs)}, expected {h * w} for shape {(h, w)}"
        )
    values = np.arange(len(runs)) % 2 == 1  # runs alternate 0,1,0,...
    return np.repeat(values, runs).reshape(h, w)


# ---------------------------------------------------------------------------
# image wire format: 8-bit grayscale PNG in base64

def image_to_b64(image: np.ndarray) -> str:
    arr = np.asarray(image, dtype=np.float32)
    png = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    png.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_from_b64(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload, validate=True)
    img = Image.open(io.BytesIO(raw)).convert("L")
    return np.asarray(img, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# errors

class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.field = field

    def body(self) -> dict:
        doc = {"code": self.code, "message": self.message}
        if self.field is not None:
            doc["field"] = self.field
        return doc


def _bad_request(message: str, field: str | None = None) -> ApiError:
    return ApiError(400, "invalid_request", message, field)


def _not_found(message: str, field: str | None = None) -> ApiError:
    return ApiError(404, "not_found", message, field)


# ---------------------------------------------------------------------------
# request schemas (strict: unknown fields are rejected, not ignored)

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PointIn(_Strict):
    x: float
    y: float
    label: str = "positive"


class BoxIn(_Strict):
    x0: float
    y0: float
    x1: float
    y1: float


class ImageRefIn(_Strict):
    image_b64: str | None = None
    dataset: str | None = None
    slice_id: str | None = None


class SegmentIn(_Strict):
    image_ref: ImageRefIn
    points: list[PointIn] = []
    boxes: list[BoxIn] = []
    text: str | None = None
    threshold: float = 0.0
    allow_silent: bool = False


class ReloadIn(_Strict):
    checkpoint: str


# ---------------------------------------------------------------------------
# application state

@dataclass
class AppState:
    model: Segmenter | None = None
    model_meta: dict = field(default_factory=dict)
    datasets: dict[str, DatasetManifest] = field(default_factory=dict)
    allow_reload: bool = False

    def require_model(self) -> Segmenter:
        if self.model is None:
            raise ApiError(409, "model_not_loaded", "no checkpoint is loaded")
        return self.model


def model_meta_for(model: Segmenter, extra: dict, checkpoint_path: str) -> dict:
    return {
        "ablation": extra.get("ablation", "full"),
        "checkpoint_id": weights_fingerprint(model),
        "checkpoint_path": str(checkpoint_path),
        "config_hash": model.cfg.hash(),
    }


def load_state(
    checkpoint: str | None = None,
    datasets: dict[str, str] | None = None,
    allow_reload: bool = False,
) -> AppState:
    """Build service state: read-only checkpoint plus registered datasets."""
    state = AppState(allow_reload=allow_reload)
    if checkpoint is not None:
        model, extra = load_checkpoint(checkpoint)
        model.eval()
        state.model = model
        state.model_meta = model_meta_for(model, extra, checkpoint)
    for name, root in (datasets or {}).items():
        state.datasets[name] = DatasetManifest.load(root)
    return state


# ---------------------------------------------------------------------------
# request resolution helpers

def _resolve_image(
    state: AppState, ref: ImageRefIn, image_size: int
) -> tuple[np.ndarray, SliceSample | None]:
    inline = ref.image_b64 is not None
    by_slice = ref.dataset is not None or ref.slice_id is not None
    if inline == by_slice:
        raise _bad_request(
            "image_ref needs either image_b64 or dataset+slice_id",
            field="image_ref",
        )
    if inline:
        try:
            image = image_from_b64(ref.image_b64)
        except (binascii.Error, ValueError, UnidentifiedImageError) as exc:
            raise _bad_request(
                f"image_b64 is not a readable base64 PNG: {exc}",
                field="image_ref.image_b64",
            ) from None
        if image.shape != (image_size, image_size):
            raise _bad_request(
                f"image must be {image_size}x{image_size}, got "
                f"{image.shape[0]}x{image.shape[1]}",
                field="image_ref.image_b64",
            )
        return image, None
    if ref.dataset is None or ref.slice_id is None:
        raise _bad_request(
            "dataset and slice_id must be given together", field="image_ref"
        )
    sample = _lookup_slice(state, ref.dataset, ref.slice_id)
    image = np.asarray(sample.image, dtype=np.float32)
    if image.shape != (image_size, image_size):
        raise _bad_request(
            f"slice is {image.shape[0]}x{image.shape[1]} but the model "
            f"expects {image_size}x{image_size}",
            field="image_ref.slice_id",
        )
    return image, sample


def _lookup_slice(state: AppState, dataset: str, slice_id: str) -> SliceSample:
    manifest = state.datasets.get(dataset)
    if manifest is None:
        raise _not_found(f"unknown dataset {dataset!r}", field="dataset")
    for entry in manifest.entries:
        if entry.path == slice_id:
            return read_archive(manifest.root / entry.path)
    raise _not_found(
        f"unknown slice {slice_id!r} in dataset {dataset!r}", field="slice_id"
    )


def _parse_prompts(
    body: SegmentIn, image_size: int
) -> tuple[list[PointPrompt], list[BoxPrompt]]:
    points = []
    for i, p in enumerate(body.points):
        try:
            label = PointLabel(p.label)
        except ValueError:
            raise _bad_request(
                f"label must be one of {[l.value for l in PointLabel]}, "
                f"got {p.label!r}",
                field=f"points[{i}].label",
            ) from None
        for axis in ("x", "y"):
            v = getattr(p, axis)
            if not (0 <= v <= image_size) and label is not PointLabel.INVALID:
                raise _bad_request(
                    f"{axis}={v} outside [0, {image_size}]",
                    field=f"points[{i}].{axis}",
                )
        try:
            points.append(PointPrompt(p.x, p.y, label))
        except PromptError as exc:
            raise _bad_request(str(exc), field=f"points[{i}]") from None
    boxes = []
    for i, b in enumerate(body.boxes):
        for corner in ("x0", "y0", "x1", "y1"):
            v = getattr(b, corner)
            if not (0 <= v <= image_size):
                raise _bad_request(
                    f"{corner}={v} outside [0, {image_size}]",
                    field=f"boxes[{i}].{corner}",
                )
        try:
            boxes.append(BoxPrompt(b.x0, b.y0, b.x1, b.y1))
        except PromptError as exc:
            raise _bad_request(str(exc), field=f"boxes[{i}]") from None
    return points, boxes


def _loc_to_field(loc: tuple) -> str:
    parts = []
    for piece in loc:
        if piece == "body":
            continue
        if isinstance(piece, int):
            parts.append(f"[{piece}]")
        else:
            parts.append(("." if parts else "") + str(piece))
    return "".join(parts) or "body"


# ---------------------------------------------------------------------------
# app factory

def create_app(state: AppState, cors_origins: tuple[str, ...] = ()) -> FastAPI:
    app = FastAPI(title="promptseg", docs_url=None, redoc_url=None)
    app.state.seg = state
    if cors_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=list(cors_origins),
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body())

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        return JSONResponse(
            status_code=400,
            content={
                "code": "invalid_request",
                "message": first.get("msg", "invalid request"),
                "field": _loc_to_field(tuple(first.get("loc", ()))),
            },
        )

    @app.exception_handler(Exception)
    async def _internal_error(request: Request, exc: Exception):
        return JSONResponse(
            status_code=500,
            content={
                "code": "internal",
                "message": f"internal error (id {uuid.uuid4().hex[:12]})",
            },
        )

    @app.get("/v1/model")
    def get_model():
        st: AppState = app.state.seg
        model = st.require_model()
        return {
            **st.model_meta,
            "image_size": model.image_size,
            "parameters": model.count_parameters(),
            "supported_prompts": list(SUPPORTED_PROMPTS),
        }

    @app.get("/v1/slices")
    def list_slices(
        dataset: str,
        offset: int = Query(default=0, ge=0),
        limit: int = Query(default=50, ge=1, le=MAX_PAGE_SIZE),
    ):
        st: AppState = app.state.seg
        manifest = st.datasets.get(dataset)
        if manifest is None:
            raise _not_found(f"unknown dataset {dataset!r}", field="dataset")
        entries = manifest.entries  # already sorted by path: stable order
        page = entries[offset:offset + limit]
        return {
            "dataset": dataset,
            "total": len(entries),
            "offset": offset,
            "limit": limit,
            "slices": [
                {
                    "id": e.path,
                    "organ_id": e.organ_id,
                    "split": e.split,
                    "has_reference": True,
                }
                for e in page
            ],
        }

    @app.get("/v1/slices/{slice_id:path}")
    def get_slice(slice_id: str, dataset: str):
        st: AppState = app.state.seg
        sample = _lookup_slice(st, dataset, slice_id)
        image = np.asarray(sample.image, dtype=np.float32)
        return {
            "id": slice_id,
            "dataset": dataset,
            "shape": list(image.shape),
            "image_b64": image_to_b64(image),
            "organ_id": sample.organ_id,
            "organ_name": sample.organ_name,
            "text_prompt": sample.text_prompt,
            "has_reference": True,
        }

    @app.post("/v1/segment")
    def segment(body: SegmentIn):
        st: AppState = app.state.seg
        model = st.require_model()
        size = model.image_size
        image, sample = _resolve_image(st, body.image_ref, size)
        points, boxes = _parse_prompts(body, size)
        has_text = body.text is not None and body.text.strip() != ""
        if not points and not boxes and not has_text and not body.allow_silent:
            raise _bad_request(
                "no prompts given; pass points, boxes, text, or allow_silent",
                field="allow_silent",
            )
        start = time.perf_counter()
        try:
            result = model.segment(
                torch.from_numpy(np.ascontiguousarray(image)),
                points=points or None,
                boxes=boxes or None,
                text=body.text if has_text else None,
                threshold=body.threshold,
            )
        except (PromptError, ShapeError) as exc:
            raise _bad_request(str(exc)) from None
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        pred = result.mask.numpy()
        dsc_vs_reference = None
        if sample is not None:
            dsc_vs_reference = metrics.dsc(pred, np.asarray(sample.mask) > 0)
        return {
            "mask": {"shape": list(pred.shape), "rle": rle_encode(pred)},
            "dsc_vs_reference": dsc_vs_reference,
            "model_info": {
                "ablation": st.model_meta.get("ablation", "full"),
                "checkpoint_id": st.model_meta.get("checkpoint_id"),
                "config_hash": st.model_meta.get("config_hash"),
            },
            "timing_ms": elapsed_ms,
        }

    @app.post("/v1/admin/reload")
    def reload(body: ReloadIn):
        st: AppState = app.state.seg
        if not st.allow_reload:
            raise ApiError(403, "reload_disabled",
                           "reload is disabled; start the service with allow_reload")
        try:
            model, extra = load_checkpoint(body.checkpoint)
        except FileNotFoundError:
            raise _not_found(f"checkpoint {body.checkpoint!r} not found",
                             field="checkpoint") from None
        model.eval()
        st.model = model  # atomic swap; in-flight requests keep the old ref
        st.model_meta = model_meta_for(model, extra, body.checkpoint)
        return {"ok": True, **st.model_meta}

    return app
