"""Data pipeline: volume ingestion, windowing, slice extraction, sample
archives, dataset manifests, and the synthetic-shapes benchmark.

Dataset directory layout:

    <root>/<organ_name>/<volume_id>_<slice_idx>.npz
    <root>/manifest.json

Each .npz holds the arrays "image" and "mask" plus a "meta" record (organ,
prompt, source). Archives are written deterministically so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from promptseg.errors import (
    ArchiveFormatError,
    ConfigurationError,
    GenerationError,
    ShapeError,
)


class ArchiveIOError(OSError):
    """Archive could not be read; carries the offending path."""

    def __init__(self, message: str, path: str):
        super().__init__(message)
        self.path = path


ORGAN_NAMES = {1: "liver", 2: "kidney", 3: "spleen", 4: "pancreas"}
SHAPE_NAMES = {1: "circle", 2: "square", 3: "triangle", 4: "cross"}

SPLITS = ("train", "val", "test")

#: default CT window for abdominal soft tissue, in HU
DEFAULT_WINDOW = (-200.0, 300.0)
DEFAULT_MIN_PIXELS = 100
DEFAULT_SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

# fixed timestamp so archive bytes do not depend on wall-clock time
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# ---------------------------------------------------------------------------
# prompt templates

_TEMPLATES: dict[str, str] = {"default": "segment the {name}"}


def register_template(key: str, fmt: str) -> None:
    """Register an alternate prompt template; must contain '{name}'."""
    if "{name}" not in fmt:
        raise ConfigurationError(f"template {key!r} must contain '{{name}}'")
    _TEMPLATES[key] = fmt


def prompt_text_for(organ_name: str, template: str = "default") -> str:
    """Render the text prompt for a target name, e.g. 'segment the liver'."""
    if not organ_name:
        raise ValueError("organ_name must be nonempty")
    return _TEMPLATES[template].format(name=organ_name)


# ---------------------------------------------------------------------------
# domain types

@dataclass
class VolumeRecord:
    """A labeled 3D volume: voxels [D,H,W] float, labels [D,H,W] int in
    0..4, spacing (z, y, x) in mm."""

    voxels: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float, float]
    id: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.voxels.ndim != 3:
            raise ShapeError(f"voxels must be rank-3, got {self.voxels.shape}")
        if self.voxels.shape != self.labels.shape:
            raise ShapeError(
                f"voxels {self.voxels.shape} and labels {self.labels.shape} differ"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        bad = set(np.unique(self.labels)) - {0, 1, 2, 3, 4}
        if bad:
            raise ValueError(f"labels outside 0..4: {sorted(bad)}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        if not self.id:
            raise ValueError("volume id must be nonempty")


@dataclass
class SliceSample:
    """One 2D training/eval sample: image in [0,1], binary mask with at
    least one foreground pixel, target id/name, and its text prompt."""

    image: np.ndarray
    mask: np.ndarray
    organ_id: int
    organ_name: str
    text_prompt: str
    source: tuple[str, int]

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2 or self.mask.ndim != 2:
            raise ShapeError("image and mask must be rank-2")
        if self.image.shape != self.mask.shape:
            raise ShapeError(
                f"image {self.image.shape} and mask {self.mask.shape} differ"
            )
        if float(self.image.min()) < 0.0 or float(self.image.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        uniq = set(np.unique(self.mask).tolist())
        if not uniq <= {0, 1, True, False}:
            raise ValueError("mask must be binary")
        if not self.mask.any():
            raise ValueError("mask must contain at least one foreground pixel")
        if not (1 <= int(self.organ_id) <= 4):
            raise ValueError(f"organ_id must be in 1..4, got {self.organ_id}")
        if not self.text_prompt:
            raise ValueError("text_prompt must be nonempty")
        if self.organ_name.lower() not in self.text_prompt.lower():
            raise ValueError(
                f"text_prompt {self.text_prompt!r} does not mention {self.organ_name!r}"
            )
        self.source = (str(self.source[0]), int(self.source[1]))


@dataclass
class ManifestEntry:
    path: str  # relative to the dataset root
    organ_id: int
    split: str

    @property
    def volume_id(self) -> str:
        # layout is <volume_id>_<slice_idx>.npz
        return Path(self.path).stem.rsplit("_", 1)[0]


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    normalization: dict | None = None

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def volume_ids_by_split(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {s: set() for s in SPLITS}
        for e in self.entries:
            out[e.split].add(e.volume_id)
        return out

    def check_split_disjointness(self) -> None:
        by_split = self.volume_ids_by_split()
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1:]:
                inter = by_split[a] & by_split[b]
                if inter:
                    raise ValueError(
                        f"volumes in both {a} and {b}: {sorted(inter)[:5]}"
                    )

    def save(self) -> Path:
        self.check_split_disjointness()
        path = Path(self.root) / "manifest.json"
        doc = {
            "entries": [
                {"organ_id": e.organ_id, "path": e.path, "split": e.split}
                for e in self.entries
            ],
            "normalization": self.normalization,
            "seed": self.seed,
        }
        path.write_text(
            json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        return path

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(path=e["path"], organ_id=int(e["organ_id"]), split=e["split"])
            for e in doc["entries"]
        ]
        return cls(
            root=root,
            entries=entries,
            seed=int(doc["seed"]),
            normalization=doc.get("normalization"),
        )

    def load_samples(self, split: str | None = None) -> list[SliceSample]:
        entries = self.entries if split is None else self.split_entries(split)
        return [read_archive(Path(self.root) / e.path) for e in entries]

    def verify(self) -> None:
        """Assert every referenced archive exists and reads back cleanly."""
        for e in self.entries:
            p = Path(self.root) / e.path
            if not p.exists():
                raise FileNotFoundError(f"missing archive {p}")
            read_archive(p)


# ---------------------------------------------------------------------------
# operations

def window_normalize(voxels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map intensities through the window [lo, hi] to [0, 1], clipping."""
    if lo >= hi:
        raise ConfigurationError(f"window requires lo < hi, got ({lo}, {hi})")
    x = np.asarray(voxels, dtype=np.float32)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def extract_slices(
    volume: VolumeRecord,
    organ_id: int,
    min_pixels: int = DEFAULT_MIN_PIXELS,
    template: str = "default",
) -> list[SliceSample]:
    """One sample per axial slice where the organ covers >= min_pixels.

    The volume's voxels must already be normalized to [0, 1]. Slices where
    the organ is absent or too small are skipped; a volume with no
    qualifying slice gives an empty list.
    """
    if organ_id not in ORGAN_NAMES:
        raise ValueError(f"organ_id must be in 1..4, got {organ_id}")
    if min_pixels < 1:
        raise ValueError(f"min_pixels must be >= 1, got {min_pixels}")
    name = ORGAN_NAMES[organ_id]
    prompt = prompt_text_for(name, template)
    out = []
    for k in range(volume.labels.shape[0]):
        organ_mask = volume.labels[k] == organ_id
        if int(organ_mask.sum()) < min_pixels:
            continue
        out.append(
            SliceSample(
                image=volume.voxels[k],
                mask=organ_mask.astype(np.uint8),
                organ_id=organ_id,
                organ_name=name,
                text_prompt=prompt,
                source=(volume.id, k),
            )
        )
    return out


def write_archive(sample: SliceSample, path: str | Path) -> None:
    """Persist a sample as a compressed .npz; byte-deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "organ_id": sample.organ_id,
        "organ_name": sample.organ_name,
        "slice_index": sample.source[1],
        "text_prompt": sample.text_prompt,
        "volume_id": sample.source[0],
    }
    arrays = {
        "image": np.asarray(sample.image),
        "mask": np.asarray(sample.mask),
        "meta": np.array(json.dumps(meta, sort_keys=True)),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[name], allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_archive(path: str | Path) -> SliceSample:
    """Load a sample archive; raises ArchiveIOError for unreadable files and
    ArchiveFormatError naming the first missing key."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            present = set(npz.files)
            for key in ("image", "mask", "meta"):
                if key not in present:
                    raise ArchiveFormatError(
                        f"archive {path} is missing key {key!r}", key=key
                    )
            image = npz["image"]
            mask = npz["mask"]
            meta = json.loads(str(npz["meta"][()]))
    except ArchiveFormatError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as err:
        raise ArchiveIOError(f"cannot read archive {path}: {err}", str(path)) from err
    return SliceSample(
        image=image,
        mask=mask,
        organ_id=meta["organ_id"],
        organ_name=meta["organ_name"],
        text_prompt=meta["text_prompt"],
        source=(meta["volume_id"], meta["slice_index"]),
    )


def read_volume_npz(path: str | Path) -> VolumeRecord:
    """Desk-scale volume reader: a .npz with voxels, labels and spacing.

    Any reader producing VolumeRecord works for ingestion; this is the
    format `prepare-data` consumes.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            for key in ("voxels", "labels", "spacing"):
                if key not in npz.files:
                    raise ArchiveFormatError(
                        f"volume {path} is missing key {key!r}", key=key
                    )
            return VolumeRecord(
                voxels=npz["voxels"],
                labels=npz["labels"].astype(np.int64),
                spacing=tuple(float(s) for s in npz["spacing"]),
                id=path.stem,
            )
    except ArchiveFormatError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile) as err:
        raise ArchiveIOError(f"cannot read volume {path}: {err}", str(path)) from err


def write_volume_npz(volume: VolumeRecord, path: str | Path) -> None:
    """Inverse of read_volume_npz, for building test fixtures."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        voxels=volume.voxels,
        labels=volume.labels,
        spacing=np.asarray(volume.spacing, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# split assignment and dataset builders

def assign_splits(
    volume_ids: list[str],
    seed: int,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
) -> dict[str, str]:
    """Shuffle volume ids and cut train/val/test by the given fractions.

    Deterministic for a given (ids, seed). Splits are disjoint by volume id
    by construction.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    ids = sorted(set(volume_ids))
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    out = {}
    for i, vid in enumerate(ids):
        if i < n_train:
            out[vid] = "train"
        elif i < n_train + n_val:
            out[vid] = "val"
        else:
            out[vid] = "test"
    return out


def _archive_relpath(sample: SliceSample) -> str:
    vid, idx = sample.source
    return f"{sample.organ_name}/{vid}_{idx}.npz"


def build_manifest(
    samples: list[SliceSample],
    root: str | Path,
    seed: int,
    normalization: dict | None = None,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
) -> DatasetManifest:
    """Write sample archives under root and a manifest with volume-level
    splits."""
    root = Path(root)
    split_of = assign_splits(sorted({s.source[0] for s in samples}), seed, fractions)
    entries = []
    for sample in samples:
        rel = _archive_relpath(sample)
        write_archive(sample, root / rel)
        entries.append(
            ManifestEntry(
                path=rel, organ_id=sample.organ_id, split=split_of[sample.source[0]]
            )
        )
    entries.sort(key=lambda e: e.path)
    manifest = DatasetManifest(
        root=root, entries=entries, seed=seed, normalization=normalization
    )
    manifest.save()
    return manifest


def prepare_dataset(
    volumes: list[VolumeRecord],
    root: str | Path,
    organs: list[int] | None = None,
    window: tuple[float, float] = DEFAULT_WINDOW,
    min_pixels: int = DEFAULT_MIN_PIXELS,
    seed: int = 0,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
) -> DatasetManifest:
    """Window-normalize volumes, extract per-organ slices, persist archives
    and manifest."""
    organs = organs or sorted(ORGAN_NAMES)
    lo, hi = window
    samples = []
    for vol in volumes:
        normed = VolumeRecord(
            voxels=window_normalize(vol.voxels, lo, hi),
            labels=vol.labels,
            spacing=vol.spacing,
            id=vol.id,
        )
        for organ_id in organs:
            samples.extend(extract_slices(normed, organ_id, min_pixels))
    return build_manifest(
        samples,
        root,
        seed=seed,
        normalization={"lo": lo, "hi": hi},
        fractions=fractions,
    )


# ---------------------------------------------------------------------------
# synthetic shapes

_PLACEMENT_RETRIES = 200


def _raster_circle(size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _raster_square(size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def _raster_triangle(size: int, cy: int, cx: int, r: int) -> np.ndarray:
    # isoceles, apex up: half-width grows linearly from 0 at the apex
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - (cy - r)  # 0 at apex .. 2r at base
    halfw = dy / 2.0
    return (dy >= 0) & (dy <= 2 * r) & (np.abs(xx - cx) <= halfw)


def _raster_cross(size: int, cy: int, cx: int, r: int) -> np.ndarray:
    t = max(1, r // 3)
    yy, xx = np.mgrid[0:size, 0:size]
    horiz = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)
    vert = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= t)
    return horiz | vert


_RASTERIZERS = {
    1: _raster_circle,
    2: _raster_square,
    3: _raster_triangle,
    4: _raster_cross,
}


def render_shape(kind: int, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    """Rasterize one shape (1=circle, 2=square, 3=triangle, 4=cross) on a
    size x size grid."""
    return _RASTERIZERS[kind](size, cy, cx, r)


def synth_image(
    rng: np.random.Generator, size: int
) -> tuple[np.ndarray, list[tuple[int, np.ndarray]]]:
    """One synthetic image with two non-overlapping shapes of distinct kinds.

    Returns (image, [(shape_id, mask), ...]). Shape intensity is random per
    instance so brightness never identifies the kind; the text prompt is the
    only disambiguator.
    """
    kinds = rng.choice(sorted(_RASTERIZERS), size=2, replace=False)
    r_lo = max(5, size // 10)
    r_hi = max(r_lo + 1, size // 5)
    image = np.zeros((size, size), dtype=np.float32)
    placed: list[tuple[int, np.ndarray]] = []
    occupied = np.zeros((size, size), dtype=bool)
    for kind in kinds:
        for attempt in range(_PLACEMENT_RETRIES):
            r = int(rng.integers(r_lo, r_hi + 1))
            cy = int(rng.integers(r + 1, size - r - 1))
            cx = int(rng.integers(r + 1, size - r - 1))
            mask = render_shape(int(kind), size, cy, cx, r)
            if not (mask & occupied).any():
                break
        else:
            raise GenerationError(
                f"could not place shape {SHAPE_NAMES[int(kind)]} without overlap "
                f"after {_PLACEMENT_RETRIES} attempts"
            )
        intensity = float(rng.uniform(0.35, 0.95))
        image[mask] = intensity
        occupied |= mask
        placed.append((int(kind), mask))
    return image, placed


def synth_dataset(
    n_images: int,
    image_size: int,
    seed: int,
    root: str | Path,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
) -> DatasetManifest:
    """Generate the synthetic-shapes dataset: two shapes per image, one
    sample per shape, prompts 'segment the {shape}'.

    A pure function of (n_images, image_size, seed): reruns produce
    byte-identical archives and manifest.
    """
    if n_images < 1:
        raise ConfigurationError(f"n_images must be >= 1, got {n_images}")
    if image_size < 32:
        raise ConfigurationError(f"image_size must be >= 32, got {image_size}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_images):
        vid = f"synth{seed}_{i:04d}"
        image, placed = synth_image(rng, image_size)
        for kind, mask in placed:
            name = SHAPE_NAMES[kind]
            samples.append(
                SliceSample(
                    image=image,
                    mask=mask.astype(np.uint8),
                    organ_id=kind,
                    organ_name=name,
                    text_prompt=prompt_text_for(name),
                    source=(vid, 0),
                )
            )
    return build_manifest(samples, root, seed=seed, fractions=fractions)
