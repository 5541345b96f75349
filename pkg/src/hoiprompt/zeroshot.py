"""Interaction inventory and zero-shot split construction.

An inventory is the closed set of verbs, object classes, and valid
(verb, object) compositions with ids. Splits hold out compositions (UC,
RF-UC, NF-UC), whole verbs (UV), or whole objects (UO); training
annotations are then filtered so no held-out composition is ever
supervised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .frontend import AnnotationRecord

SETTINGS = ("UC", "RF-UC", "NF-UC", "UV", "UO")


@dataclass(frozen=True)
class Composition:
    comp_id: int
    verb: int
    object: int


class HOIInventory:
    """Closed inventory of verbs, objects, and valid compositions."""

    def __init__(self, verbs: list[str], objects: list[str], compositions: list[Composition],
                 frequencies: dict[int, int] | None = None):
        self.verbs = list(verbs)
        self.objects = list(objects)
        self.compositions = sorted(compositions, key=lambda c: c.comp_id)
        ids = [c.comp_id for c in self.compositions]
        if len(set(ids)) != len(ids):
            raise ValidationError("composition ids must be unique")
        for c in self.compositions:
            if not 0 <= c.verb < len(self.verbs):
                raise ValidationError(f"composition {c.comp_id} has unknown verb {c.verb}")
            if not 0 <= c.object < len(self.objects):
                raise ValidationError(f"composition {c.comp_id} has unknown object {c.object}")
        self._by_pair = {(c.verb, c.object): c.comp_id for c in self.compositions}
        self._by_id = {c.comp_id: c for c in self.compositions}
        self.frequencies = {c.comp_id: 0 for c in self.compositions}
        if frequencies:
            for k, v in frequencies.items():
                if k not in self._by_id:
                    raise ValidationError(f"frequency given for unknown composition {k}")
                if v < 0:
                    raise ValidationError(f"negative frequency for composition {k}")
                self.frequencies[k] = int(v)

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def comp_id(self, verb: int, obj: int) -> int | None:
        return self._by_pair.get((verb, obj))

    def composition(self, comp_id: int) -> Composition:
        if comp_id not in self._by_id:
            raise ValidationError(f"unknown composition id {comp_id}")
        return self._by_id[comp_id]

    def valid_matrix(self) -> np.ndarray:
        """(num_verbs, num_objects) bool matrix of valid compositions."""
        m = np.zeros((self.num_verbs, self.num_objects), dtype=bool)
        for c in self.compositions:
            m[c.verb, c.object] = True
        return m

    def count_frequencies(self, annotations: dict[str, AnnotationRecord]) -> "HOIInventory":
        """New inventory with per-composition counts taken from annotations."""
        freq = {c.comp_id: 0 for c in self.compositions}
        for rec in annotations.values():
            for hoi in rec.hois:
                cid = self.comp_id(hoi.verb, rec.labels[hoi.object_idx])
                if cid is None:
                    raise ValidationError(
                        f"annotation ({hoi.verb}, {rec.labels[hoi.object_idx]}) "
                        f"is not a valid composition"
                    )
                freq[cid] += 1
        return HOIInventory(self.verbs, self.objects, self.compositions, freq)

    def to_json(self) -> str:
        return json.dumps(
            {
                "verbs": self.verbs,
                "objects": self.objects,
                "compositions": [
                    {"id": c.comp_id, "verb": c.verb, "object": c.object,
                     "freq": self.frequencies[c.comp_id]}
                    for c in self.compositions
                ],
            },
            indent=2,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def from_json(text: str) -> "HOIInventory":
        payload = json.loads(text)
        comps = [Composition(c["id"], c["verb"], c["object"]) for c in payload["compositions"]]
        freq = {c["id"]: c.get("freq", 0) for c in payload["compositions"]}
        return HOIInventory(payload["verbs"], payload["objects"], comps, freq)

    @staticmethod
    def load(path: str | Path) -> "HOIInventory":
        return HOIInventory.from_json(Path(path).read_text())


@dataclass(frozen=True)
class ZeroShotSplit:
    setting: str
    seed: int
    unseen: frozenset[int]
    seen: frozenset[int]

    def __post_init__(self):
        if self.unseen & self.seen:
            raise ValidationError("seen and unseen composition sets overlap")

    def to_json(self) -> str:
        return json.dumps(
            {
                "setting": self.setting,
                "seed": self.seed,
                "unseen": sorted(self.unseen),
                "seen": sorted(self.seen),
            },
            indent=2,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def from_json(text: str) -> "ZeroShotSplit":
        payload = json.loads(text)
        return ZeroShotSplit(
            setting=payload["setting"],
            seed=int(payload["seed"]),
            unseen=frozenset(payload["unseen"]),
            seen=frozenset(payload["seen"]),
        )

    @staticmethod
    def load(path: str | Path) -> "ZeroShotSplit":
        return ZeroShotSplit.from_json(Path(path).read_text())


def _verbs_with_comps(inv: HOIInventory) -> list[int]:
    return sorted({c.verb for c in inv.compositions})


def _objects_with_comps(inv: HOIInventory) -> list[int]:
    return sorted({c.object for c in inv.compositions})


def build_split(inv: HOIInventory, setting: str, count: int, seed: int,
                max_retries: int = 200) -> ZeroShotSplit:
    """Construct a zero-shot split over the inventory.

    UC draws `count` random compositions but keeps every verb and object
    represented among the seen ones; RF-UC / NF-UC take the `count`
    lowest- / highest-frequency compositions (ties by id); UV / UO hold
    out `count` whole verbs / objects.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown zero-shot setting '{setting}' (choose from {SETTINGS})")
    if count < 0:
        raise ConfigError(f"held-out count must be >= 0, got {count}")
    all_ids = [c.comp_id for c in inv.compositions]
    if not all_ids:
        raise ConfigError("inventory has no compositions")

    if count == 0:
        unseen: set[int] = set()
    elif setting in ("UC", "RF-UC", "NF-UC"):
        if count >= len(all_ids):
            raise ConfigError(
                f"cannot hold out {count} of {len(all_ids)} compositions"
            )
        if setting == "RF-UC":
            ranked = sorted(all_ids, key=lambda cid: (inv.frequencies[cid], cid))
            unseen = set(ranked[:count])
        elif setting == "NF-UC":
            ranked = sorted(all_ids, key=lambda cid: (-inv.frequencies[cid], cid))
            unseen = set(ranked[:count])
        else:
            rng = np.random.default_rng(seed)
            verbs_needed = set(_verbs_with_comps(inv))
            objects_needed = set(_objects_with_comps(inv))
            unseen = set()
            for _ in range(max_retries):
                cand = set(rng.choice(all_ids, size=count, replace=False).tolist())
                seen_comps = [inv.composition(c) for c in all_ids if c not in cand]
                if {c.verb for c in seen_comps} == verbs_needed and {
                    c.object for c in seen_comps
                } == objects_needed:
                    unseen = cand
                    break
            else:
                raise ConfigError(
                    f"could not draw a UC split keeping all verbs and objects seen "
                    f"after {max_retries} tries"
                )
    elif setting == "UV":
        verbs = _verbs_with_comps(inv)
        if count >= len(verbs):
            raise ConfigError(f"cannot hold out {count} of {len(verbs)} verbs")
        rng = np.random.default_rng(seed)
        held = set(rng.choice(verbs, size=count, replace=False).tolist())
        unseen = {c.comp_id for c in inv.compositions if c.verb in held}
    else:  # UO
        objects = _objects_with_comps(inv)
        if count >= len(objects):
            raise ConfigError(f"cannot hold out {count} of {len(objects)} objects")
        rng = np.random.default_rng(seed)
        held = set(rng.choice(objects, size=count, replace=False).tolist())
        unseen = {c.comp_id for c in inv.compositions if c.object in held}

    seen = set(all_ids) - unseen
    return ZeroShotSplit(setting=setting, seed=seed, unseen=frozenset(unseen), seen=frozenset(seen))


def filter_training_annotations(
    annotations: dict[str, AnnotationRecord],
    split: ZeroShotSplit,
    inv: HOIInventory,
) -> dict[str, AnnotationRecord]:
    """Drop interaction triplets whose composition is held out.

    Instance boxes and labels stay untouched (the detector stage uses
    them); images whose triplet list empties are kept with an empty list
    so detection-side consumers still see them.
    """
    out: dict[str, AnnotationRecord] = {}
    for image_id, rec in annotations.items():
        kept = []
        for hoi in rec.hois:
            cid = inv.comp_id(hoi.verb, rec.labels[hoi.object_idx])
            if cid is None:
                raise ValidationError(
                    f"image {image_id}: annotation ({hoi.verb}, "
                    f"{rec.labels[hoi.object_idx]}) is not in the inventory"
                )
            if cid in split.seen:
                kept.append(hoi)
        out[image_id] = replace(rec, hois=kept)
    return out
