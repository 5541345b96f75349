"""Detection-style mAP evaluation over interaction compositions.

A prediction is a scored (human box, object box, composition) triple; it
counts as a true positive when an unmatched ground truth of the same
composition in the same image overlaps both boxes with IoU > 0.5. Average
precision uses all-point interpolation; composition APs are averaged
within the unseen / seen / full groups and summarized by the harmonic
mean of seen and unseen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import iou_matrix
from .zeroshot import HOIInventory, ZeroShotSplit

DEFAULT_IOU_THRESH = 0.5


@dataclass(frozen=True)
class GroundTruthHoi:
    image_id: str
    comp_id: int
    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]


@dataclass(frozen=True)
class PredictedHoi:
    image_id: str
    comp_id: int
    score: float
    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]


@dataclass
class CompositionMatches:
    """Per-composition matching outcome, predictions ordered by score."""

    comp_id: int
    scores: np.ndarray  # descending
    tp_flags: np.ndarray  # bool, aligned with scores
    matched_gt: list[int | None]  # index into that composition's gt list
    n_gt: int


@dataclass
class Metrics:
    setting: str
    per_composition: dict[int, float]  # comp_id -> AP (only comps with ground truth)
    gt_counts: dict[int, int]
    map_unseen: float | None
    map_seen: float | None
    map_full: float | None
    hm: float | None
    groups: dict[int, str] = field(default_factory=dict)

    def to_payload(self, inv: HOIInventory | None = None) -> dict:
        per_class = []
        for cid in sorted(self.per_composition):
            entry = {
                "composition": cid,
                "ap": self.per_composition[cid],
                "n_gt": self.gt_counts[cid],
                "group": self.groups.get(cid, "seen"),
            }
            if inv is not None:
                comp = inv.composition(cid)
                entry["verb"] = comp.verb
                entry["object"] = comp.object
            per_class.append(entry)
        return {
            "setting": self.setting,
            "map_unseen": self.map_unseen,
            "map_seen": self.map_seen,
            "map_full": self.map_full,
            "hm": self.hm,
            "per_class": per_class,
        }

    def to_json(self, inv: HOIInventory | None = None) -> str:
        return json.dumps(self.to_payload(inv), indent=2)

    def render_table(self) -> str:
        def fmt(x):
            return "  absent" if x is None else f"{100 * x:8.2f}"

        lines = [
            f"setting: {self.setting}",
            f"{'group':<8}{'mAP x100':>10}",
            f"{'unseen':<8}{fmt(self.map_unseen):>10}",
            f"{'seen':<8}{fmt(self.map_seen):>10}",
            f"{'full':<8}{fmt(self.map_full):>10}",
            f"{'HM':<8}{fmt(self.hm):>10}",
        ]
        return "\n".join(lines)


def _pred_sort_key(p: PredictedHoi):
    serialized = json.dumps(
        [p.image_id, p.comp_id, list(p.human_box), list(p.object_box)], sort_keys=True
    )
    return (-p.score, serialized)


def match_predictions(
    preds: list[PredictedHoi],
    gts: list[GroundTruthHoi],
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> dict[int, CompositionMatches]:
    """Greedy per-composition matching in descending score order.

    A prediction matches an unmatched same-image ground truth when both
    the human and object IoU exceed the threshold; among several
    candidates the one with the larger min(IoU_h, IoU_o) wins, ties going
    to the earliest ground truth. Output covers every composition that
    appears in either list.
    """
    comp_ids = sorted({g.comp_id for g in gts} | {p.comp_id for p in preds})
    out: dict[int, CompositionMatches] = {}
    for cid in comp_ids:
        cgts = [g for g in gts if g.comp_id == cid]
        cpreds = sorted((p for p in preds if p.comp_id == cid), key=_pred_sort_key)
        taken = [False] * len(cgts)
        flags = np.zeros(len(cpreds), dtype=bool)
        matched: list[int | None] = [None] * len(cpreds)
        gt_by_image: dict[str, list[int]] = {}
        for gi, g in enumerate(cgts):
            gt_by_image.setdefault(g.image_id, []).append(gi)
        for pi, p in enumerate(cpreds):
            best_gi, best_min_iou = None, iou_thresh
            for gi in gt_by_image.get(p.image_id, []):
                if taken[gi]:
                    continue
                g = cgts[gi]
                ih = iou_matrix([p.human_box], [g.human_box])[0, 0]
                io = iou_matrix([p.object_box], [g.object_box])[0, 0]
                m = min(ih, io)
                if m > best_min_iou:
                    best_gi, best_min_iou = gi, m
            if best_gi is not None:
                taken[best_gi] = True
                flags[pi] = True
                matched[pi] = best_gi
        out[cid] = CompositionMatches(
            comp_id=cid,
            scores=np.array([p.score for p in cpreds], dtype=np.float64),
            tp_flags=flags,
            matched_gt=matched,
            n_gt=len(cgts),
        )
    return out


def precision_recall_curve(flags: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision/recall along the ranked prediction list."""
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / max(n_gt, 1)
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if n_gt < 1:
        raise ValidationError("average precision needs at least one ground truth")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    recall, precision = precision_recall_curve(flags, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags].sum() / n_gt)


def harmonic_mean(seen: float, unseen: float) -> float:
    """HM of the two group mAPs; 0 when both are 0."""
    if seen + unseen == 0.0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


def evaluate(
    preds: list[PredictedHoi],
    gts: list[GroundTruthHoi],
    split: ZeroShotSplit,
    iou_thresh: float = DEFAULT_IOU_THRESH,
    exclude_comp_ids: frozenset[int] | set[int] = frozenset(),
) -> Metrics:
    """Group-wise mAP: mean AP over compositions that carry ground truth.

    Compositions without ground truth are skipped (absent, not zero); a
    group with no evaluable composition reports an absent mAP, and the
    harmonic mean is absent when either group is.
    """
    known = split.seen | split.unseen
    for p in preds:
        if p.comp_id not in known:
            raise ValidationError(f"prediction composition {p.comp_id} is not in the split")
    for g in gts:
        if g.comp_id not in known:
            raise ValidationError(f"ground-truth composition {g.comp_id} is not in the split")

    matches = match_predictions(preds, gts, iou_thresh=iou_thresh)
    per_comp: dict[int, float] = {}
    gt_counts: dict[int, int] = {}
    groups: dict[int, str] = {}
    for cid, m in matches.items():
        if cid in exclude_comp_ids or m.n_gt == 0:
            continue
        per_comp[cid] = average_precision(m.tp_flags, m.n_gt)
        gt_counts[cid] = m.n_gt
        groups[cid] = "unseen" if cid in split.unseen else "seen"

    def group_map(which: str | None) -> float | None:
        vals = [ap for cid, ap in per_comp.items() if which is None or groups[cid] == which]
        return float(np.mean(vals)) if vals else None

    map_seen = group_map("seen")
    map_unseen = group_map("unseen")
    map_full = group_map(None)
    hm = None
    if map_seen is not None and map_unseen is not None:
        hm = harmonic_mean(map_seen, map_unseen)
    return Metrics(
        setting=split.setting,
        per_composition=per_comp,
        gt_counts=gt_counts,
        map_unseen=map_unseen,
        map_seen=map_seen,
        map_full=map_full,
        hm=hm,
        groups=groups,
    )


def ground_truths_from_annotations(annotations, inv: HOIInventory) -> list[GroundTruthHoi]:
    """Flatten annotation records into composition-tagged ground truths."""
    out = []
    for rec in annotations.values():
        for hoi in rec.hois:
            cid = inv.comp_id(hoi.verb, rec.labels[hoi.object_idx])
            if cid is None:
                raise ValidationError(
                    f"image {rec.image_id}: ({hoi.verb}, {rec.labels[hoi.object_idx]}) "
                    f"is not a valid composition"
                )
            out.append(
                GroundTruthHoi(
                    image_id=rec.image_id,
                    comp_id=cid,
                    human_box=tuple(rec.boxes[hoi.human_idx].as_list()),
                    object_box=tuple(rec.boxes[hoi.object_idx].as_list()),
                )
            )
    return out


def predictions_from_records(records: list[dict], inv: HOIInventory) -> list[PredictedHoi]:
    """Convert per-image prediction payloads into composition-tagged entries.

    Each record is {"image_id": ..., "predictions": [{"human_bbox", "object_bbox",
    "object", "verb", "score"}]} as written by the predict stage.
    """
    out = []
    for rec in records:
        image_id = str(rec["image_id"])
        for p in rec["predictions"]:
            cid = inv.comp_id(int(p["verb"]), int(p["object"]))
            if cid is None:
                raise ValidationError(
                    f"image {image_id}: prediction ({p['verb']}, {p['object']}) "
                    f"is not a valid composition"
                )
            out.append(
                PredictedHoi(
                    image_id=image_id,
                    comp_id=cid,
                    score=float(p["score"]),
                    human_box=tuple(float(x) for x in p["human_bbox"]),
                    object_box=tuple(float(x) for x in p["object_bbox"]),
                )
            )
    return out


def load_predictions(path: str | Path, inv: HOIInventory) -> list[PredictedHoi]:
    records = []
    for raw in Path(path).read_text().splitlines():
        if raw.strip():
            records.append(json.loads(raw))
    return predictions_from_records(records, inv)
