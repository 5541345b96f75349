"""Box geometry, pairwise spatial descriptors, and clustered spatial patterns.

Everything here is pure numpy: axis-aligned boxes in pixel coordinates,
the 16-dimensional spatial descriptor computed for a (human, object) box
pair, and seeded Lloyd K-means used to distill descriptors of interactive
pairs into a small set of representative layout patterns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

SPATIAL_FEATURE_DIM = 16
FEATURE_LAYOUT_VERSION = 1

_EPS_AREA = 1e-8


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box (x1, y1) top-left, (x2, y2) bottom-right, pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"box has non-finite coordinates: {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"box has degenerate extent: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clip(self, img: "ImageSize") -> "BBox":
        """Clip to image bounds; raises if nothing with positive area remains."""
        x1 = min(max(self.x1, 0.0), float(img.width))
        y1 = min(max(self.y1, 0.0), float(img.height))
        x2 = min(max(self.x2, 0.0), float(img.width))
        y2 = min(max(self.y2, 0.0), float(img.height))
        if not (x1 < x2 and y1 < y2):
            raise ValidationError(
                f"box {self.as_list()} has zero area after clipping to {img.width}x{img.height}"
            )
        return BBox(x1, y1, x2, y2)

    @staticmethod
    def from_list(coords) -> "BBox":
        if len(coords) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(coords)}")
        return BBox(*(float(c) for c in coords))


@dataclass(frozen=True)
class ImageSize:
    """Image extent in pixels."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when they are disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) arrays of xyxy boxes."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(
        boxes_a[:, None, 0], boxes_b[None, :, 0]
    )
    iy = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(
        boxes_a[:, None, 1], boxes_b[None, :, 1]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def union_box(a: BBox, b: BBox) -> BBox:
    """Smallest box containing both inputs."""
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def pairwise_spatial_features(human: BBox, obj: BBox, img: ImageSize) -> np.ndarray:
    """16-dim spatial descriptor for a human/object box pair.

    Fixed layout (version 1):
      0-3   human center x/y and width/height, normalized by image size
      4-7   object center x/y and width/height, normalized by image size
      8     IoU of the two boxes
      9-10  human / object areas normalized by image area
      11    log area ratio log((a_obj + eps) / (a_hum + eps))
      12-13 object-center offset in human-box units ((cx_o-cx_h)/w_h, (cy_o-cy_h)/h_h)
      14    center offset length / image diagonal
      15    aspect-ratio (w/h) difference, human minus object

    Boxes are clipped to the image first; a box that ends up with zero area
    is rejected.
    """
    h = human.clip(img)
    o = obj.clip(img)
    w, hgt = float(img.width), float(img.height)
    cxh, cyh = h.center
    cxo, cyo = o.center
    feats = np.empty(SPATIAL_FEATURE_DIM, dtype=np.float64)
    feats[0:4] = (cxh / w, cyh / hgt, h.width / w, h.height / hgt)
    feats[4:8] = (cxo / w, cyo / hgt, o.width / w, o.height / hgt)
    feats[8] = iou(h, o)
    feats[9] = h.area / (w * hgt)
    feats[10] = o.area / (w * hgt)
    feats[11] = np.log((o.area + _EPS_AREA) / (h.area + _EPS_AREA))
    feats[12] = (cxo - cxh) / h.width
    feats[13] = (cyo - cyh) / h.height
    feats[14] = float(np.hypot(cxo - cxh, cyo - cyh)) / img.diagonal
    feats[15] = h.width / h.height - o.width / o.height
    return feats


@dataclass
class GlobalSpatialPatterns:
    """K cluster centers of interactive-pair spatial descriptors."""

    centers: np.ndarray  # (K, SPATIAL_FEATURE_DIM)
    seed: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != SPATIAL_FEATURE_DIM:
            raise ValidationError(
                f"pattern centers must be (K, {SPATIAL_FEATURE_DIM}), got {self.centers.shape}"
            )
        if self.centers.shape[0] < 1:
            raise ValidationError("need at least one pattern center")
        if not np.all(np.isfinite(self.centers)):
            raise ValidationError("pattern centers contain non-finite values")

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])

    def to_json(self) -> str:
        payload = {
            "d_sp": SPATIAL_FEATURE_DIM,
            "K": self.k,
            "centers": self.centers.tolist(),
            "seed": self.seed,
            "feature_layout_version": FEATURE_LAYOUT_VERSION,
        }
        return json.dumps(payload, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def from_json(text: str) -> "GlobalSpatialPatterns":
        payload = json.loads(text)
        if payload.get("d_sp") != SPATIAL_FEATURE_DIM:
            raise ValidationError(f"unsupported descriptor width {payload.get('d_sp')}")
        if payload.get("feature_layout_version") != FEATURE_LAYOUT_VERSION:
            raise ValidationError(
                f"unsupported feature layout version {payload.get('feature_layout_version')}"
            )
        gsp = GlobalSpatialPatterns(np.array(payload["centers"]), seed=int(payload["seed"]))
        if gsp.k != payload["K"]:
            raise ValidationError("center count does not match K")
        return gsp

    @staticmethod
    def load(path: str | Path) -> "GlobalSpatialPatterns":
        return GlobalSpatialPatterns.from_json(Path(path).read_text())


def _kmeans_pp_init(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared-distance sampling."""
    n = features.shape[0]
    centers = np.empty((k, features.shape[1]), dtype=np.float64)
    centers[0] = features[rng.integers(n)]
    d2 = np.sum((features - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = centers[0]
            break
        centers[i] = features[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((features - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(features: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, float]:
    """Lloyd iterations until the assignment is a fixed point (or max_iter)."""
    k = centers.shape[0]
    labels = np.full(features.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        empty = []
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = features[mask].mean(axis=0)
            else:
                empty.append(j)
        if empty:
            # reseed emptied clusters to the points farthest from their centers
            far = np.argsort(-d2.min(axis=1))
            for rank, j in enumerate(empty):
                centers[j] = features[far[rank % len(far)]]
    d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2.min(axis=1).sum())
    return centers, inertia


def fit_global_spatial_patterns(
    features,
    k: int,
    seed: int,
    max_iter: int = 300,
    n_init: int = 4,
) -> GlobalSpatialPatterns:
    """Cluster spatial descriptors with seeded Lloyd K-means.

    Runs `n_init` independent k-means++ starts (seeds derived from `seed`)
    and keeps the solution with the lowest inertia. Deterministic given
    (features, k, seed).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        feats = feats.reshape(len(features), -1)
    if feats.shape[0] == 0:
        raise ConfigError("cannot fit spatial patterns on an empty feature list")
    if k < 1:
        raise ConfigError(f"pattern count must be >= 1, got {k}")
    if feats.shape[0] < k:
        raise ConfigError(f"need at least K={k} descriptors, got {feats.shape[0]}")
    if not np.all(np.isfinite(feats)):
        raise ValidationError("spatial descriptors contain non-finite values")

    best_centers, best_inertia = None, np.inf
    for trial in range(max(1, n_init)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trial,)))
        centers = _kmeans_pp_init(feats, k, rng)
        centers, inertia = _lloyd(feats, centers, max_iter)
        if inertia < best_inertia:
            best_centers, best_inertia = centers, inertia
    return GlobalSpatialPatterns(best_centers, seed=seed)
