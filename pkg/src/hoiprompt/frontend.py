"""Detector-output ingestion, pair enumeration, and instance-prior assembly.

The first stage of the pipeline is an external object detector; its outputs
arrive as JSONL, one image per line:

    {"image_id": str, "width": int, "height": int,
     "detections": [{"bbox": [x1, y1, x2, y2], "score": float, "label": int}]}

Ground-truth annotations use the same header plus instance boxes/labels and
interaction triplets indexing into them:

    {"image_id": str, "width": int, "height": int,
     "boxes": [[x1, y1, x2, y2], ...], "labels": [int, ...],
     "hoi": [{"human_idx": int, "object_idx": int, "verb": int}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .geometry import BBox, ImageSize, union_box

PERSON_LABEL = 0

DEFAULT_SCORE_THRESH_PERSON = 0.2
DEFAULT_SCORE_THRESH_OBJECT = 0.2
DEFAULT_MAX_DETECTIONS = 15


@dataclass(frozen=True)
class Detection:
    """One detector output: box, confidence, object-class label."""

    bbox: BBox
    score: float
    label: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection score {self.score} outside [0, 1]")
        if self.label < 0:
            raise ValidationError(f"detection label {self.label} is negative")

    @property
    def is_person(self) -> bool:
        return self.label == PERSON_LABEL


@dataclass(frozen=True)
class HumanObjectPair:
    """Ordered (human, object) pairing with the enclosing union box."""

    human: Detection
    object: Detection
    human_idx: int
    object_idx: int
    union: BBox = field(init=False)

    def __post_init__(self):
        if not self.human.is_person:
            raise ValidationError("pair anchor must be a person detection")
        if self.human_idx == self.object_idx:
            raise ValidationError("a detection cannot pair with itself")
        object.__setattr__(self, "union", union_box(self.human.bbox, self.object.bbox))


@dataclass
class ImageRecord:
    """Parsed detections line."""

    image_id: str
    size: ImageSize
    detections: list[Detection]


@dataclass
class HoiAnnotation:
    """One interaction triplet indexing into the image's instance list."""

    human_idx: int
    object_idx: int
    verb: int


@dataclass
class AnnotationRecord:
    """Parsed ground-truth line: instances plus interaction triplets."""

    image_id: str
    size: ImageSize
    boxes: list[BBox]
    labels: list[int]
    hois: list[HoiAnnotation]


def _require(obj: dict, key: str, path: str, line: int):
    if key not in obj:
        raise ParseError(f"missing key '{key}'", path=path, line=line)
    return obj[key]


def _iter_jsonl(path: str | Path):
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            yield lineno, json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=str(path), line=lineno) from exc


def load_detections(path: str | Path, num_classes: int | None = None) -> dict[str, ImageRecord]:
    """Read a detections JSONL file into {image_id: ImageRecord}.

    With `num_classes`, labels outside [0, num_classes) are rejected.
    """
    records: dict[str, ImageRecord] = {}
    for lineno, obj in _iter_jsonl(path):
        image_id = str(_require(obj, "image_id", str(path), lineno))
        if image_id in records:
            raise ParseError(f"duplicate image_id '{image_id}'", path=str(path), line=lineno)
        try:
            size = ImageSize(int(_require(obj, "width", str(path), lineno)),
                             int(_require(obj, "height", str(path), lineno)))
            dets = []
            for d in _require(obj, "detections", str(path), lineno):
                det = Detection(
                    bbox=BBox.from_list(d["bbox"]),
                    score=float(d["score"]),
                    label=int(d["label"]),
                )
                if num_classes is not None and det.label >= num_classes:
                    raise ValidationError(
                        f"label {det.label} outside inventory of {num_classes} classes"
                    )
                dets.append(det)
        except ValidationError as exc:
            raise ParseError(str(exc), path=str(path), line=lineno) from exc
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed detection record: {exc}", path=str(path), line=lineno) from exc
        records[image_id] = ImageRecord(image_id=image_id, size=size, detections=dets)
    return records


def load_annotations(path: str | Path, num_classes: int | None = None,
                     num_verbs: int | None = None) -> dict[str, AnnotationRecord]:
    """Read a ground-truth annotations JSONL file into {image_id: AnnotationRecord}."""
    records: dict[str, AnnotationRecord] = {}
    for lineno, obj in _iter_jsonl(path):
        image_id = str(_require(obj, "image_id", str(path), lineno))
        if image_id in records:
            raise ParseError(f"duplicate image_id '{image_id}'", path=str(path), line=lineno)
        try:
            size = ImageSize(int(_require(obj, "width", str(path), lineno)),
                             int(_require(obj, "height", str(path), lineno)))
            boxes = [BBox.from_list(b) for b in _require(obj, "boxes", str(path), lineno)]
            labels = [int(l) for l in _require(obj, "labels", str(path), lineno)]
            if len(boxes) != len(labels):
                raise ValidationError(f"{len(boxes)} boxes but {len(labels)} labels")
            if num_classes is not None:
                for l in labels:
                    if not 0 <= l < num_classes:
                        raise ValidationError(f"label {l} outside inventory of {num_classes}")
            hois = []
            for h in _require(obj, "hoi", str(path), lineno):
                hoi = HoiAnnotation(int(h["human_idx"]), int(h["object_idx"]), int(h["verb"]))
                if not 0 <= hoi.human_idx < len(boxes):
                    raise ValidationError(f"human_idx {hoi.human_idx} out of range")
                if not 0 <= hoi.object_idx < len(boxes):
                    raise ValidationError(f"object_idx {hoi.object_idx} out of range")
                if labels[hoi.human_idx] != PERSON_LABEL:
                    raise ValidationError(f"human_idx {hoi.human_idx} is not a person instance")
                if num_verbs is not None and not 0 <= hoi.verb < num_verbs:
                    raise ValidationError(f"verb {hoi.verb} outside inventory of {num_verbs}")
                hois.append(hoi)
        except ValidationError as exc:
            raise ParseError(str(exc), path=str(path), line=lineno) from exc
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed annotation record: {exc}", path=str(path), line=lineno) from exc
        records[image_id] = AnnotationRecord(image_id, size, boxes, labels, hois)
    return records


def filter_detections(
    dets: list[Detection],
    score_thresh_person: float = DEFAULT_SCORE_THRESH_PERSON,
    score_thresh_object: float = DEFAULT_SCORE_THRESH_OBJECT,
    max_detections: int = DEFAULT_MAX_DETECTIONS,
) -> list[Detection]:
    """Keep confident detections, then the top-k by score.

    Order is descending score with input order breaking ties, which makes
    the filter idempotent.
    """
    for name, t in (("person", score_thresh_person), ("object", score_thresh_object)):
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"{name} score threshold {t} outside [0, 1]")
    if max_detections < 0:
        raise ConfigError(f"max_detections must be >= 0, got {max_detections}")
    kept = [
        (i, d)
        for i, d in enumerate(dets)
        if d.score >= (score_thresh_person if d.is_person else score_thresh_object)
    ]
    kept.sort(key=lambda item: (-item[1].score, item[0]))
    return [d for _, d in kept[:max_detections]]


def enumerate_pairs(dets: list[Detection]) -> list[HumanObjectPair]:
    """All ordered (human, object) pairs over the detections.

    Every person detection anchors a pair with every other detection,
    persons included (person is an ordinary object class); self-pairs are
    excluded.
    """
    pairs = []
    for i, h in enumerate(dets):
        if not h.is_person:
            continue
        for j, o in enumerate(dets):
            if j == i:
                continue
            pairs.append(HumanObjectPair(human=h, object=o, human_idx=i, object_idx=j))
    return pairs


def assemble_instance_prior(
    dets: list[Detection],
    embeddings: dict[int, np.ndarray],
    img: ImageSize,
) -> np.ndarray:
    """Raw per-detection prior rows: [normalized box (4), score (1), class embedding].

    Returns an (N, 5 + d_e) float64 matrix; N = 0 gives an empty matrix of
    the right width. `embeddings` maps class label to a unit-norm vector.
    """
    if not embeddings:
        raise ConfigError("class embedding table is empty")
    dims = {v.shape[-1] for v in embeddings.values()}
    if len(dims) != 1:
        raise ConfigError(f"class embeddings have inconsistent widths: {sorted(dims)}")
    d_e = dims.pop()
    out = np.zeros((len(dets), 5 + d_e), dtype=np.float64)
    for i, det in enumerate(dets):
        if det.label not in embeddings:
            raise ConfigError(f"no semantic embedding for class {det.label}")
        b = det.bbox
        out[i, 0:4] = (b.x1 / img.width, b.y1 / img.height, b.x2 / img.width, b.y2 / img.height)
        out[i, 4] = det.score
        out[i, 5:] = np.asarray(embeddings[det.label], dtype=np.float64)
    return out
