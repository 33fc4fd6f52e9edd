"""Domain types, synthetic scene generation, domain shifts, and dataset IO.

Images are H x W x 3 float32 arrays in [0, 1], quantized to the 8-bit grid so
that PNG serialization round-trips exactly. Depth maps are H x W float32 in
[0, 1] on the 16-bit grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from .errors import ConfigError, DataError

SOURCE_DOMAIN = 0
TARGET_DOMAIN = 1

CLASS_NAMES = ("circle", "square", "triangle")

# split codes used to derive disjoint per-split seeds
_SPLIT_CODES = {
    "source_train": 11,
    "target_train": 23,
    "source_test": 37,
    "target_test": 53,
    "third_test": 71,
    "oracle_pool": 89,
}


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, origin top-left, x1<x2, y1<y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def flipped(self, width: float) -> "BoundingBox":
        """Mirror horizontally inside an image of the given width."""
        return BoundingBox(width - self.x2, self.y1, width - self.x1, self.y2)


@dataclass(frozen=True)
class Detection:
    """A predicted box with class label and confidence score."""

    box: BoundingBox
    label: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class AnnotatedImage:
    """Image plus ground-truth boxes (empty for unlabeled target images)."""

    pixels: np.ndarray
    annotations: list[tuple[BoundingBox, int]]
    domain: int = SOURCE_DOMAIN
    depth: np.ndarray | None = None
    masks: list[np.ndarray] | None = None  # per-object visibility, not serialized

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Dataset:
    """Ordered collection of images sharing a split and a domain tag."""

    items: list[AnnotatedImage]
    split: str
    domain: int
    name: str = ""
    shift: str = "none"

    def __post_init__(self):
        for img in self.items:
            if img.domain != self.domain:
                raise ValueError("dataset items must share the domain tag")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic shape-scene generator."""

    image_size: int = 64
    num_classes: int = 3
    objects_min: int = 1
    objects_max: int = 4
    scale_min: float = 12.0
    scale_max: float = 26.0
    background_base: float = 0.25
    background_noise: float = 0.08
    shift_kind: str = "fog"
    shift_severity: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if not (1 <= self.num_classes <= len(CLASS_NAMES)):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ConfigError("objects_per_image range is empty")
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise ConfigError("object scale range is empty")
        if self.scale_max >= self.image_size:
            raise ConfigError("object scale exceeds image size")
        if self.shift_kind not in ("fog", "palette"):
            raise ConfigError(f"unknown shift_kind {self.shift_kind!r}")
        if self.shift_severity < 0:
            raise ConfigError("shift_severity must be >= 0")


@dataclass
class ExperimentSplits:
    """All datasets of one experiment; target-train labels live in a sidecar."""

    source_train: Dataset
    target_train: Dataset
    source_test: Dataset
    target_test: Dataset
    target_train_labels: list[list[tuple[BoundingBox, int]]]
    third_test: Dataset | None = None


def quantize8(pixels: np.ndarray) -> np.ndarray:
    """Snap [0,1] floats onto the 8-bit grid (PNG round-trip exact)."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def quantize16(values: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(values, 0.0, 1.0) * 65535.0) / 65535.0).astype(np.float32)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint or degenerate."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _paint_background(rng: np.random.Generator, size: int, spec: SceneSpec) -> np.ndarray:
    base = spec.background_base + rng.uniform(-0.05, 0.05)
    img = np.full((size, size, 3), base, dtype=np.float64)
    # low-frequency noise: coarse grid upsampled bilinearly
    coarse = rng.uniform(-1.0, 1.0, size=(5, 5, 3))
    ys = np.linspace(0, 4, size)
    xs = np.linspace(0, 4, size)
    y0 = np.floor(ys).astype(int).clip(0, 3)
    x0 = np.floor(xs).astype(int).clip(0, 3)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    noise = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
             + c10 * fy * (1 - fx) + c11 * fy * fx)
    return img + spec.background_noise * noise


def _shape_mask(kind: int, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    # pixel centers at integer coordinates + 0.5
    xc = xx + 0.5
    yc = yy + 0.5
    if kind == 0:  # circle
        return (xc - cx) ** 2 + (yc - cy) ** 2 <= half ** 2
    if kind == 1:  # square
        return (np.abs(xc - cx) <= half) & (np.abs(yc - cy) <= half)
    if kind == 2:  # triangle, apex up
        inside_y = (yc >= cy - half) & (yc <= cy + half)
        return inside_y & (np.abs(xc - cx) <= (yc - (cy - half)) / 2.0)
    raise ValueError(f"unknown shape kind {kind}")


def _tight_box(mask: np.ndarray) -> BoundingBox | None:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return BoundingBox(float(xs.min()), float(ys.min()),
                       float(xs.max() + 1), float(ys.max() + 1))


def generate_scene(spec: SceneSpec, index: int, include_masks: bool = False) -> AnnotatedImage:
    """Render one clean source-style scene, a pure function of (spec.seed, index)."""
    size = spec.image_size
    rng = np.random.default_rng([abs(spec.seed), index, 0x5CE4E])
    img = _paint_background(rng, size, spec)

    count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    ownership = np.full((size, size), -1, dtype=np.int32)
    kinds: list[int] = []
    placed: list[BoundingBox] = []
    for i in range(count):
        kind = int(rng.integers(0, spec.num_classes))
        mask = None
        for _attempt in range(50):
            scale = rng.uniform(spec.scale_min, spec.scale_max)
            half = scale / 2.0
            cx = rng.uniform(half + 1, size - half - 1)
            cy = rng.uniform(half + 1, size - half - 1)
            cand = BoundingBox(cx - half, cy - half, cx + half, cy + half)
            if all(box_iou(cand, p) <= 0.2 for p in placed):
                mask = _shape_mask(kind, cx, cy, half, size)
                placed.append(cand)
                break
        if mask is None:  # crowded image: place anyway to honor the count
            mask = _shape_mask(kind, cx, cy, half, size)
            placed.append(cand)
        color = rng.uniform(0.45, 1.0, size=3)
        color[int(rng.integers(0, 3))] = rng.uniform(0.75, 1.0)
        img[mask] = color
        ownership[mask] = i
        kinds.append(kind)

    # depth: radial background gradient plus one flat value per object
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    radial = np.hypot(yy - center, xx - center) / np.hypot(center, center)
    depth = 0.35 + 0.65 * radial
    annotations: list[tuple[BoundingBox, int]] = []
    masks: list[np.ndarray] = []
    for i, kind in enumerate(kinds):
        visible = ownership == i
        obj_depth = rng.uniform(0.15, 1.0)
        depth[visible] = obj_depth
        box = _tight_box(visible)
        if box is not None:  # fully occluded shapes carry no annotation
            annotations.append((box, kind))
            masks.append(visible)

    return AnnotatedImage(
        pixels=quantize8(img),
        annotations=annotations,
        domain=SOURCE_DOMAIN,
        depth=quantize16(depth),
        masks=masks if include_masks else None,
    )


ATMOSPHERIC_LIGHT = 1.0


def apply_domain_shift(img: AnnotatedImage, kind: str, severity: float,
                       seed: int = 0) -> AnnotatedImage:
    """Photometric shift to the target domain; annotations are untouched."""
    if severity < 0:
        raise ConfigError("severity must be >= 0")
    if kind == "fog":
        if img.depth is None:
            raise DataError("fog shift requires a depth map")
        t = np.exp(-severity * img.depth)[:, :, None]
        out = img.pixels * t + ATMOSPHERIC_LIGHT * (1.0 - t)
    elif kind == "palette":
        if severity == 0:
            out = img.pixels.copy()
        else:
            rng = np.random.default_rng([abs(seed), 0xA11])
            hsv = rgb_to_hsv(img.pixels)
            hsv[..., 0] = (hsv[..., 0] + 1.0 / 3.0 + rng.uniform(-0.05, 0.05)) % 1.0
            out = hsv_to_rgb(hsv)
            # solarize: invert everything brighter than a severity-scaled
            # threshold, flipping contrast polarity across most of the image
            thr = max(0.0, 1.0 - severity / 4.0)
            out = np.where(out > thr, 1.0 - out, out)
            levels = max(2, int(round(12 - 2 * severity)))
            out = np.clip(np.floor(out * levels), 0, levels - 1) / (levels - 1)
    else:
        raise ConfigError(f"unknown shift kind {kind!r}")
    return AnnotatedImage(
        pixels=quantize8(out),
        annotations=list(img.annotations),
        domain=TARGET_DOMAIN,
        depth=img.depth,
        masks=img.masks,
    )


def _split_seed(base_seed: int, split: str) -> int:
    return int(np.random.SeedSequence([abs(base_seed), _SPLIT_CODES[split]])
               .generate_state(1)[0])


def _generate_split(spec: SceneSpec, split: str, count: int,
                    shift: str | None = None, severity: float = 0.0) -> Dataset:
    sub = replace(spec, seed=_split_seed(spec.seed, split))
    items = []
    for i in range(count):
        img = generate_scene(sub, i)
        if shift is not None:
            img = apply_domain_shift(img, shift, severity, seed=sub.seed + i)
        items.append(img)
    domain = TARGET_DOMAIN if shift is not None else SOURCE_DOMAIN
    return Dataset(items=items, split="test" if split.endswith("test") else "train",
                   domain=domain, name=split, shift=shift or "none")


def build_experiment(spec: SceneSpec, n_source: int, n_target: int, n_test: int,
                     third_shift: str | None = None,
                     third_severity: float | None = None) -> ExperimentSplits:
    """Build all splits with disjoint seeds; target-train labels go to a sidecar."""
    if min(n_source, n_target, n_test) < 1:
        raise ConfigError("split sizes must be >= 1")
    source_train = _generate_split(spec, "source_train", n_source)
    target_full = _generate_split(spec, "target_train", n_target,
                                  shift=spec.shift_kind, severity=spec.shift_severity)
    source_test = _generate_split(spec, "source_test", n_test)
    target_test = _generate_split(spec, "target_test", n_test,
                                  shift=spec.shift_kind, severity=spec.shift_severity)

    # strip target-train annotations into the analysis-only sidecar
    sidecar = [list(img.annotations) for img in target_full.items]
    for img in target_full.items:
        img.annotations = []

    third = None
    if third_shift is not None:
        if third_shift == spec.shift_kind:
            raise ConfigError("third domain must use a different shift than the target")
        sev = spec.shift_severity if third_severity is None else third_severity
        third = _generate_split(spec, "third_test", n_test, shift=third_shift, severity=sev)
    return ExperimentSplits(source_train, target_full, source_test, target_test,
                            sidecar, third)


# ---------------------------------------------------------------------------
# serialization


def _save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.round(pixels * 255.0).astype(np.uint8)).save(path)


def _save_depth(path: Path, depth: np.ndarray) -> None:
    arr = np.round(depth * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _load_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path), dtype=np.float32) / 255.0).astype(np.float32)


def _load_depth(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32)
    return (arr / 65535.0).astype(np.float32)


def _boxes_record(annotations: list[tuple[BoundingBox, int]]) -> list[list[float]]:
    return [[b.x1, b.y1, b.x2, b.y2, float(c)] for b, c in annotations]


def _parse_boxes(raw, where: str) -> list[tuple[BoundingBox, int]]:
    out = []
    for entry in raw:
        if not isinstance(entry, list) or len(entry) != 5:
            raise DataError(f"{where}: box record must be [x1,y1,x2,y2,cls]")
        x1, y1, x2, y2, cls = entry
        out.append((BoundingBox(float(x1), float(y1), float(x2), float(y2)), int(cls)))
    return out


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write PNG images, optional .depth.png maps, annotations.jsonl, meta.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    for i, img in enumerate(ds.items):
        name = f"img_{i:05d}.png"
        _save_png(path / name, img.pixels)
        if img.depth is not None:
            _save_depth(path / f"img_{i:05d}.depth.png", img.depth)
        records.append({"file": name, "domain": img.domain,
                        "boxes": _boxes_record(img.annotations)})
    with open(path / "annotations.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    meta = {"split": ds.split, "domain": ds.domain, "name": ds.name,
            "shift": ds.shift, "count": len(ds.items)}
    (path / "meta.json").write_text(json.dumps(meta, indent=2))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no dataset at {path} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    items = []
    with open(path / "annotations.jsonl") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                name = rec["file"]
                domain = int(rec["domain"])
                boxes = _parse_boxes(rec["boxes"], f"line {lineno}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"annotations.jsonl line {lineno}: {exc}") from exc
            pixels = _load_png(path / name)
            depth_path = path / (name[:-4] + ".depth.png")
            depth = _load_depth(depth_path) if depth_path.exists() else None
            items.append(AnnotatedImage(pixels=pixels, annotations=boxes,
                                        domain=domain, depth=depth))
    return Dataset(items=items, split=meta["split"], domain=meta["domain"],
                   name=meta.get("name", ""), shift=meta.get("shift", "none"))


def save_sidecar(labels: list[list[tuple[BoundingBox, int]]], path: str | Path) -> None:
    """Persist held-out target-train labels separately from the dataset dir."""
    with open(path, "w") as fh:
        for i, annotations in enumerate(labels):
            fh.write(json.dumps({"index": i, "boxes": _boxes_record(annotations)}) + "\n")


class SidecarAudit:
    """Counts sidecar reads so tests can assert the trainer never looks."""

    def __init__(self):
        self.reads = 0

    def reset(self):
        self.reads = 0


sidecar_audit = SidecarAudit()


def load_sidecar(path: str | Path) -> list[list[tuple[BoundingBox, int]]]:
    sidecar_audit.reads += 1
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(_parse_boxes(rec["boxes"], f"line {lineno}"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"sidecar line {lineno}: {exc}") from exc
    return out


def dataset_fingerprint(ds: Dataset) -> str:
    """Stable content hash used to assert that rows share identical splits."""
    import hashlib

    h = hashlib.sha256()
    for img in ds.items:
        h.update(np.ascontiguousarray(img.pixels).tobytes())
        for box, cls in img.annotations:
            h.update(np.float64([box.x1, box.y1, box.x2, box.y2, cls]).tobytes())
    return h.hexdigest()[:16]
