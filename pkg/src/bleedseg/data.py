"""Dataset handling: synthetic sample generation, polygon-annotation ingestion,
rasterization, augmentation, patient-wise splitting and batch assembly.

Masks are plain ``uint8`` arrays of shape (H, W) holding only 0 and 1. Images
are ``float32`` arrays of shape (H, W, 3) with values in [0, 1]. On disk,
masks are single-channel 8-bit PNGs with foreground 255 (any value > 127
reads back as 1) and images are 8-bit RGB PNGs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

Mask = np.ndarray  # (H, W) uint8 in {0, 1}


def check_binary_mask(mask: np.ndarray) -> None:
    """Reject arrays that are not 2-D with values restricted to {0, 1}."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and not np.isin(mask, (0, 1)).all():
        bad = np.unique(mask[~np.isin(mask, (0, 1))])
        raise ValueError(f"mask contains values outside {{0, 1}}: {bad[:5]}")


@dataclass
class ImageSample:
    """One frame: pixels in [0, 1], optional ground-truth mask, patient identity."""

    id: str
    patient_id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: Mask | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must have shape (H, W, 3), got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")
        if self.mask is not None:
            check_binary_mask(self.mask)
            if self.mask.shape != self.pixels.shape[:2]:
                raise ValueError(
                    f"mask shape {self.mask.shape} != image shape {self.pixels.shape[:2]}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass
class PolygonShape:
    label: str
    points: np.ndarray  # (N, 2) float64, columns (x, y)


@dataclass
class PolygonAnnotation:
    """Polygon outlines for one image, a compatible subset of the LabelMe format."""

    image_id: str
    height: int
    width: int
    shapes: list[PolygonShape] = field(default_factory=list)


@dataclass
class DatasetSplit:
    train: list[ImageSample]
    val: list[ImageSample]


@dataclass
class Batch:
    """Labeled (pixels, mask) pairs plus unlabeled pixel arrays for one step."""

    labeled: list[tuple[np.ndarray, Mask]]
    unlabeled: list[np.ndarray]


# ---------------------------------------------------------------------------
# rasterization

def rasterize_polygons(ann: PolygonAnnotation) -> Mask:
    """Rasterize polygon outlines to a binary mask.

    A pixel (r, c) is foreground iff its center (c + 0.5, r + 0.5) lies inside
    any shape under the even-odd rule.
    """
    mask = np.zeros((ann.height, ann.width), dtype=bool)
    for idx, shape in enumerate(ann.shapes):
        pts = np.asarray(shape.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValueError(
                f"shapes[{idx}]: polygon needs >= 3 (x, y) vertices, got {pts.shape}"
            )
        mask |= _even_odd_inside(pts, ann.height, ann.width)
    return mask.astype(np.uint8)


def _even_odd_inside(pts: np.ndarray, height: int, width: int) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over all pixel centers."""
    cx = np.arange(width, dtype=np.float64) + 0.5  # (W,)
    cy = (np.arange(height, dtype=np.float64) + 0.5)[:, None]  # (H, 1)
    inside = np.zeros((height, width), dtype=bool)
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        straddles = (y0 > cy) != (y1 > cy)  # (H, 1); horizontal edges never straddle
        if not straddles.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x0 + (cy - y0) / (y1 - y0) * (x1 - x0)  # (H, 1)
        inside ^= straddles & (cx[None, :] < xcross)
    return inside


# ---------------------------------------------------------------------------
# splitting and label budgets

def split_by_patient(samples: list[ImageSample], val_patients: set[str]) -> DatasetSplit:
    """Patient-wise split: samples of ``val_patients`` go to val, the rest to train."""
    for s in samples:
        if not s.patient_id:
            raise ValueError(f"sample {s.id!r} has an empty patient_id")
    known = {s.patient_id for s in samples}
    missing = set(val_patients) - known
    if missing:
        log.warning("val_patients not present in samples: %s", sorted(missing))
    train = [s for s in samples if s.patient_id not in val_patients]
    val = [s for s in samples if s.patient_id in val_patients]
    return DatasetSplit(train=train, val=val)


def select_label_budget(
    train: list[ImageSample], k: int, seed: int
) -> tuple[list[ImageSample], list[ImageSample]]:
    """Pick k samples (uniformly at random per seed) to keep labeled.

    The remainder is returned with masks withheld. Original order is preserved
    on both sides.
    """
    if not 0 <= k <= len(train):
        raise ValueError(f"label budget k={k} outside [0, {len(train)}]")
    unmasked = [s.id for s in train if s.mask is None]
    if unmasked:
        raise ValueError(f"train samples without masks cannot be budgeted: {unmasked[:5]}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(train), size=k, replace=False).tolist())
    labeled = [s for i, s in enumerate(train) if i in chosen]
    unlabeled = [replace(s, mask=None) for i, s in enumerate(train) if i not in chosen]
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# augmentation

def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Random horizontal/vertical flip (p=0.5 each) and rotation by k*90 degrees.

    The identical geometric transform is applied to pixels and mask; values are
    untouched. Draw order is fixed: hflip, vflip, k.
    """
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(0, 4))

    def apply(arr: np.ndarray) -> np.ndarray:
        if hflip:
            arr = np.flip(arr, axis=1)
        if vflip:
            arr = np.flip(arr, axis=0)
        if k:
            arr = np.rot90(arr, k, axes=(0, 1))
        return np.ascontiguousarray(arr)

    mask = apply(sample.mask) if sample.mask is not None else None
    return replace(sample, pixels=apply(sample.pixels), mask=mask)


# ---------------------------------------------------------------------------
# batch assembly

def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


class SampleStream:
    """Deterministic sample stream over a pool.

    Cycles without replacement within an epoch and reshuffles between epochs.
    Augmentation uses an rng derived from (seed, sample id, draw index), so a
    sample's augmentation sequence is independent of what else is drawn.
    """

    def __init__(self, samples: list[ImageSample], seed: int, name: str,
                 augment_samples: bool = True):
        self.samples = list(samples)
        self.seed = seed
        self.augment_samples = augment_samples
        self._order_rng = np.random.default_rng((seed, _stable_int("stream:" + name)))
        self._draws: dict[str, int] = {}
        self._perm: np.ndarray = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, n: int) -> list[ImageSample]:
        if not self.samples:
            raise ValueError("cannot draw from an empty pool")
        out = []
        for _ in range(n):
            if self._pos >= len(self._perm):
                self._perm = self._order_rng.permutation(len(self.samples))
                self._pos = 0
            sample = self.samples[int(self._perm[self._pos])]
            self._pos += 1
            if self.augment_samples:
                draw = self._draws.get(sample.id, 0)
                self._draws[sample.id] = draw + 1
                rng = np.random.default_rng((self.seed, _stable_int(sample.id), draw))
                sample = augment(sample, rng)
            out.append(sample)
        return out


def make_batch(labeled: SampleStream, unlabeled: SampleStream | None,
               batch_size: int) -> Batch:
    """Assemble one training batch.

    With an unlabeled stream (semi-supervised mode) the batch is split equally
    between the two pools; without one, all slots are labeled.
    """
    if unlabeled is not None:
        if batch_size % 2:
            raise ValueError(f"semi-supervised batch_size must be even, got {batch_size}")
        half = batch_size // 2
        lab = labeled.take(half)
        unlab = unlabeled.take(half)
    else:
        lab = labeled.take(batch_size)
        unlab = []
    for s in lab:
        if s.mask is None:
            raise ValueError(f"labeled pool sample {s.id!r} has no mask")
    return Batch(
        labeled=[(s.pixels, s.mask) for s in lab],
        unlabeled=[s.pixels for s in unlab],
    )


# ---------------------------------------------------------------------------
# synthetic data

def generate_synthetic(seed: int, n_patients: int, images_per_patient: int,
                       side: int = 64) -> list[ImageSample]:
    """Generate a deterministic synthetic dataset of lesion-like images.

    Each patient carries a persistent style (background hue and texture,
    lesion color, distractor density); each image composites 0-3 irregular
    reddish blobs over a textured mucosa-like background, with the exact blob
    pixels as ground truth. Per patient, at least 60% of images contain a
    nonempty mask. Pure function of its arguments.
    """
    if side < 32:
        raise ValueError(f"side must be >= 32, got {side}")
    samples = []
    for p in range(n_patients):
        style = _patient_style(np.random.default_rng((seed, 1000 + p)))
        counts = _blob_counts(np.random.default_rng((seed, 2000 + p)), images_per_patient)
        for i in range(images_per_patient):
            rng = np.random.default_rng((seed, 3000 + p, i))
            pixels, mask = _render_image(rng, style, counts[i], side)
            samples.append(ImageSample(
                id=f"p{p:02d}_img{i:03d}",
                patient_id=f"p{p:02d}",
                pixels=pixels,
                mask=mask,
            ))
    return samples


def _patient_style(rng: np.random.Generator) -> dict:
    return {
        # pinkish mucosa base color, varying per patient
        "base": np.array([
            rng.uniform(0.58, 0.80),
            rng.uniform(0.30, 0.46),
            rng.uniform(0.26, 0.42),
        ]),
        "tex_amp": rng.uniform(0.03, 0.08),
        "tex_sigma": rng.uniform(2.0, 5.0),
        "chan_gain": rng.uniform(0.5, 1.0, size=3),
        "vignette": rng.uniform(0.10, 0.35),
        # saturated dark-red lesion color, varying per patient
        "lesion": np.array([
            rng.uniform(0.45, 0.60),
            rng.uniform(0.04, 0.12),
            rng.uniform(0.04, 0.12),
        ]),
        "lesion_jitter": rng.uniform(0.02, 0.04),
        "n_distractors": int(rng.integers(2, 6)),
        "noise_sigma": rng.uniform(0.010, 0.022),
    }


def _blob_counts(rng: np.random.Generator, n_images: int) -> np.ndarray:
    """Blob count per image; empty images capped so >= 60% stay nonempty."""
    counts = rng.choice(4, size=n_images, p=(0.25, 0.35, 0.25, 0.15))
    max_empty = n_images - math.ceil(0.6 * n_images)
    empty = np.flatnonzero(counts == 0)
    if len(empty) > max_empty:
        promote = rng.permutation(empty)[: len(empty) - max_empty]
        counts[promote] = 1
    return counts


def _blob_inside(side: int, rng: np.random.Generator, r_lo: float, r_hi: float
                 ) -> np.ndarray:
    """Boolean mask of one randomly perturbed ellipse."""
    r0 = rng.uniform(r_lo, r_hi) * side
    margin = 1.45 * r0
    cx = rng.uniform(margin, side - margin)
    cy = rng.uniform(margin, side - margin)
    aspect = rng.uniform(0.75, 1.3)
    theta = rng.uniform(0.0, 2 * np.pi)
    harmonics = np.array([2, 3, 4, 5])
    amps = rng.uniform(0.0, 0.3, size=4)
    amps *= 0.3 / max(amps.sum(), 0.3)  # total boundary perturbation <= 30%
    phases = rng.uniform(0.0, 2 * np.pi, size=4)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * dx + st * dy) / (r0 * aspect)
    v = (-st * dx + ct * dy) / (r0 / aspect)
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    bound = 1.0 + sum(a * np.sin(k * phi + ph)
                      for k, a, ph in zip(harmonics, amps, phases))
    return rho <= bound


def _render_image(rng: np.random.Generator, style: dict, n_blobs: int,
                  side: int) -> tuple[np.ndarray, Mask]:
    tex = rng.standard_normal((side, side))
    tex = gaussian_filter(tex, sigma=style["tex_sigma"], mode="wrap")
    tex /= max(float(tex.std()), 1e-8)
    img = style["base"][None, None, :] * np.ones((side, side, 3))
    img += style["tex_amp"] * tex[:, :, None] * style["chan_gain"][None, None, :]

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    r2 = ((xx - side / 2) ** 2 + (yy - side / 2) ** 2) / (side / 2) ** 2
    img *= (1.0 - style["vignette"] * r2)[:, :, None]

    # non-lesion clutter: dusky spots and specular glints, absent from the mask
    for _ in range(style["n_distractors"]):
        spot = _blob_inside(side, rng, 0.015, 0.045)
        if rng.random() < 0.5:
            color = np.array([rng.uniform(0.22, 0.34),
                              rng.uniform(0.18, 0.28),
                              rng.uniform(0.08, 0.16)])
        else:
            color = np.array([rng.uniform(0.85, 1.0),
                              rng.uniform(0.75, 0.95),
                              rng.uniform(0.70, 0.90)])
        img[spot] = 0.35 * img[spot] + 0.65 * color

    mask = np.zeros((side, side), dtype=bool)
    for _ in range(n_blobs):
        blob = _blob_inside(side, rng, 0.09, 0.16)
        color = style["lesion"] + rng.uniform(-1, 1, size=3) * style["lesion_jitter"]
        shade = 1.0 - 0.15 * rng.random()  # mild per-blob brightness variation
        img[blob] = color[None, :] * shade
        mask |= blob

    img += rng.normal(0.0, style["noise_sigma"], size=(side, side, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# annotation files (LabelMe-compatible subset)

def load_annotation(text: str) -> PolygonAnnotation:
    """Parse and validate an annotation JSON document.

    Schema: {"image_id": str, "height": int, "width": int,
             "shapes": [{"label": str, "points": [[x, y], ...]}]}.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"annotation is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError("annotation root must be a JSON object")

    def need(obj, key, kind, path):
        if key not in obj:
            raise ValueError(f"{path}{key}: missing")
        val = obj[key]
        if kind is int and isinstance(val, bool):
            raise ValueError(f"{path}{key}: expected {kind.__name__}, got bool")
        if not isinstance(val, kind):
            raise ValueError(f"{path}{key}: expected {kind.__name__}, got {type(val).__name__}")
        return val

    image_id = need(doc, "image_id", str, "")
    height = need(doc, "height", int, "")
    width = need(doc, "width", int, "")
    if height <= 0 or width <= 0:
        raise ValueError(f"height/width must be positive, got {height}x{width}")
    raw_shapes = need(doc, "shapes", list, "")

    shapes = []
    for i, raw in enumerate(raw_shapes):
        path = f"shapes[{i}]."
        if not isinstance(raw, dict):
            raise ValueError(f"shapes[{i}]: expected object")
        label = need(raw, "label", str, path)
        points = need(raw, "points", list, path)
        if len(points) < 3:
            raise ValueError(f"{path}points: polygon needs >= 3 vertices, got {len(points)}")
        arr = np.empty((len(points), 2), dtype=np.float64)
        for j, pt in enumerate(points):
            if (not isinstance(pt, list) or len(pt) != 2
                    or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in pt)):
                raise ValueError(f"{path}points[{j}]: expected [x, y] numbers")
            x, y = float(pt[0]), float(pt[1])
            if not (0.0 <= x <= width and 0.0 <= y <= height):
                raise ValueError(
                    f"{path}points[{j}]: ({x}, {y}) outside [0, {width}] x [0, {height}]"
                )
            arr[j] = (x, y)
        shapes.append(PolygonShape(label=label, points=arr))
    return PolygonAnnotation(image_id=image_id, height=height, width=width, shapes=shapes)


def annotation_to_json(ann: PolygonAnnotation) -> str:
    doc = {
        "image_id": ann.image_id,
        "height": ann.height,
        "width": ann.width,
        "shapes": [
            {"label": s.label, "points": np.asarray(s.points, dtype=float).tolist()}
            for s in ann.shapes
        ],
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# PNG I/O

def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path: str | Path) -> Mask:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def save_mask(path: str | Path, mask: Mask) -> None:
    check_binary_mask(np.asarray(mask))
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8), mode="L").save(path)
