"""Deterministic synthetic scenes for end-to-end training and evaluation.

Each scene shows one person glyph interacting with one object glyph, plus
optional distractor objects. Verbs are realized two ways at once: the
object sits at a verb-specific angle/distance relative to the person
(carrying signal for the spatial-pattern path), and the person's torso is
tinted with a verb-specific color (carrying signal for the appearance
path). Object classes have distinct shape/color combinations. Captions,
ground-truth annotations, and jittered detector outputs are emitted in
the same schemas the pipeline consumes.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, GenerationError
from .frontend import PERSON_LABEL
from .zeroshot import Composition, HOIInventory

DEFAULT_VERBS = (
    "holding",
    "riding",
    "pushing",
    "pulling",
    "lifting",
    "throwing",
    "catching",
    "kicking",
)
DEFAULT_OBJECTS = ("cup", "ball", "crate", "bag", "book", "chair", "bike", "lamp")

_SKIN = np.array([224, 172, 140], dtype=np.float64)
BACKGROUND_LEVEL = 232
_DIRECTION_NOISE = 0.12


@dataclass(frozen=True)
class SynthConfig:
    verbs: tuple[str, ...] = DEFAULT_VERBS
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    image_size: int = 64
    pretrain_images: int = 512
    train_images: int = 320
    test_images: int = 160
    distractors_max: int = 2
    box_jitter: float = 0.05
    score_noise: float = 0.08
    seed: int = 7

    def __post_init__(self):
        if len(self.verbs) < 1 or len(self.objects) < 1:
            raise ConfigError("need at least one verb and one object class")
        if len(set(self.verbs)) != len(self.verbs) or len(set(self.objects)) != len(self.objects):
            raise ConfigError("verb and object names must be unique")
        if self.image_size < 32:
            raise ConfigError("image size must be >= 32")
        if self.box_jitter < 0 or self.score_noise < 0:
            raise ConfigError("noise levels must be >= 0")

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def build_inventory(cfg: SynthConfig) -> HOIInventory:
    """Inventory over the full verb x object grid; person is object class 0."""
    objects = ["person"] + list(cfg.objects)
    comps = []
    for v in range(len(cfg.verbs)):
        for oi in range(len(cfg.objects)):
            comps.append(Composition(v * len(cfg.objects) + oi, v, oi + 1))
    return HOIInventory(list(cfg.verbs), objects, comps)


def verb_direction_center(verb: int, num_verbs: int) -> tuple[float, float]:
    """Center of the verb's object-placement profile in person-box units."""
    theta = 2.0 * np.pi * verb / num_verbs
    rho = 1.1 + 0.5 * (verb % 2)
    return (rho * np.cos(theta), rho * np.sin(theta))


def _verb_tint(verb: int, num_verbs: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(verb / num_verbs, 0.85, 0.78)
    return np.array([255 * r, 255 * g, 255 * b], dtype=np.float64)


def _object_color(label: int, num_objects: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(((label - 1) / num_objects + 0.41) % 1.0, 0.9, 0.62)
    return np.array([255 * r, 255 * g, 255 * b], dtype=np.float64)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: list[list[float]]
    labels: list[int]
    hois: list[dict]
    caption: str
    verb: int
    object_label: int


def _draw_box_glyph(img: np.ndarray, box: list[float], shape: int, color: np.ndarray) -> None:
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    h, w = img.shape[:2]
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, w), min(y2, h)
    ys, xs = np.mgrid[y1:y2, x1:x2].astype(np.float64)
    cx, cy = (x1 + x2 - 1) / 2.0, (y1 + y2 - 1) / 2.0
    rx, ry = max((x2 - x1) / 2.0, 1.0), max((y2 - y1) / 2.0, 1.0)
    u = (xs - cx) / rx
    v = (ys - cy) / ry
    shape = shape % 8
    if shape == 0:  # square
        mask = np.ones_like(u, dtype=bool)
    elif shape == 1:  # circle
        mask = u**2 + v**2 <= 1.0
    elif shape == 2:  # triangle
        mask = (v >= -1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    elif shape == 3:  # diamond
        mask = np.abs(u) + np.abs(v) <= 1.0
    elif shape == 4:  # ring
        rr = u**2 + v**2
        mask = (rr <= 1.0) & (rr >= 0.36)
    elif shape == 5:  # cross
        mask = (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    elif shape == 6:  # bars
        mask = np.sin(v * 3 * np.pi) > 0.0
    else:  # saltire
        mask = (np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)
    region = img[y1:y2, x1:x2]
    region[mask] = color
    img[y1:y2, x1:x2] = region


def _draw_person(img: np.ndarray, box: list[float], tint: np.ndarray) -> None:
    x1, y1, x2, y2 = box
    head_h = (y2 - y1) * 0.3
    torso = [x1, y1 + head_h, x2, y2]
    _draw_box_glyph(img, torso, 0, tint)
    cx = (x1 + x2) / 2.0
    r = min((x2 - x1) * 0.32, head_h * 0.55)
    head = [cx - r, y1, cx + r, y1 + 2 * r]
    _draw_box_glyph(img, head, 1, _SKIN)


def _boxes_overlap_much(box: list[float], others: list[list[float]], limit: float = 0.25) -> bool:
    from .geometry import iou_matrix

    if not others:
        return False
    return bool(iou_matrix([box], others).max() > limit)


def generate_scene(
    rng: np.random.Generator,
    cfg: SynthConfig,
    verb: int | None = None,
    object_label: int | None = None,
    max_tries: int = 60,
) -> Scene:
    """Render one scene; deterministic given the generator state.

    With verb/object unset, a composition is drawn uniformly.
    """
    nv, no = len(cfg.verbs), len(cfg.objects)
    if verb is None:
        verb = int(rng.integers(nv))
    if object_label is None:
        object_label = int(rng.integers(1, no + 1))
    if not 0 <= verb < nv:
        raise ConfigError(f"verb {verb} outside inventory")
    if not 1 <= object_label <= no:
        raise ConfigError(f"object label {object_label} outside inventory")
    s = cfg.image_size
    dir_cx, dir_cy = verb_direction_center(verb, nv)

    for _ in range(max_tries):
        pw = rng.uniform(11.0, 15.0)
        ph = rng.uniform(17.0, 22.0)
        pcx = rng.uniform(pw / 2 + 1, s - pw / 2 - 1)
        pcy = rng.uniform(ph / 2 + 1, s - ph / 2 - 1)
        ow = rng.uniform(8.0, 13.0)
        oh = ow * rng.uniform(0.85, 1.2)
        dx = (dir_cx + rng.normal(0.0, _DIRECTION_NOISE)) * pw
        dy = (dir_cy + rng.normal(0.0, _DIRECTION_NOISE)) * ph
        ocx, ocy = pcx + dx, pcy + dy
        obox = [ocx - ow / 2, ocy - oh / 2, ocx + ow / 2, ocy + oh / 2]
        if obox[0] < 1 or obox[1] < 1 or obox[2] > s - 1 or obox[3] > s - 1:
            continue
        pbox = [pcx - pw / 2, pcy - ph / 2, pcx + pw / 2, pcy + ph / 2]

        img = np.full((s, s, 3), float(BACKGROUND_LEVEL), dtype=np.float64)

        boxes = [pbox, obox]
        labels = [PERSON_LABEL, object_label]
        n_extra = int(rng.integers(0, cfg.distractors_max + 1))
        # distractors avoid the interacted class so every (person, object)
        # pair of that class in the scene is genuinely interactive
        other_classes = [c for c in range(1, no + 1) if c != object_label]
        for _ in range(n_extra):
            if not other_classes:
                break
            for _attempt in range(20):
                dw = rng.uniform(7.0, 12.0)
                dh = dw * rng.uniform(0.85, 1.2)
                dcx = rng.uniform(dw / 2 + 1, s - dw / 2 - 1)
                dcy = rng.uniform(dh / 2 + 1, s - dh / 2 - 1)
                dbox = [dcx - dw / 2, dcy - dh / 2, dcx + dw / 2, dcy + dh / 2]
                if not _boxes_overlap_much(dbox, boxes):
                    dlabel = int(other_classes[rng.integers(len(other_classes))])
                    boxes.append(dbox)
                    labels.append(dlabel)
                    break

        # draw distractors first, then the interacting object, person on top
        for b, l in list(zip(boxes, labels))[2:]:
            _draw_box_glyph(img, b, l - 1, _object_color(l, no))
        _draw_box_glyph(img, obox, object_label - 1, _object_color(object_label, no))
        _draw_person(img, pbox, _verb_tint(verb, nv))

        caption = f"a person {cfg.verbs[verb]} a {cfg.objects[object_label - 1]}"
        return Scene(
            image=np.clip(img, 0, 255).astype(np.uint8),
            boxes=[[float(v) for v in b] for b in boxes],
            labels=labels,
            hois=[{"human_idx": 0, "object_idx": 1, "verb": verb}],
            caption=caption,
            verb=verb,
            object_label=object_label,
        )
    raise GenerationError(
        f"could not place verb {verb} / object {object_label} within {max_tries} tries"
    )


def simulate_detections(
    rng: np.random.Generator, scene: Scene, cfg: SynthConfig
) -> list[dict]:
    """Jittered, score-noised copies of the ground-truth instances."""
    s = cfg.image_size
    dets = []
    for box, label in zip(scene.boxes, scene.labels):
        w = box[2] - box[0]
        h = box[3] - box[1]
        jb = [
            box[0] + rng.normal(0, cfg.box_jitter * w),
            box[1] + rng.normal(0, cfg.box_jitter * h),
            box[2] + rng.normal(0, cfg.box_jitter * w),
            box[3] + rng.normal(0, cfg.box_jitter * h),
        ]
        jb[0] = float(np.clip(jb[0], 0, s - 2))
        jb[1] = float(np.clip(jb[1], 0, s - 2))
        jb[2] = float(np.clip(jb[2], jb[0] + 1.5, s))
        jb[3] = float(np.clip(jb[3], jb[1] + 1.5, s))
        score = float(np.clip(rng.normal(0.9, cfg.score_noise), 0.3, 0.999))
        dets.append({"bbox": jb, "score": score, "label": int(label)})
    return dets


def _composition_weights(n_comps: int) -> np.ndarray:
    # stable skew so rare-first / non-rare-first splits are distinct
    w = 1.0 + (np.arange(n_comps) * 13 % 17) / 8.0
    return w / w.sum()


def _comp_sequence(rng: np.random.Generator, n_comps: int, n_images: int) -> list[int]:
    """Every composition at least once (count permitting), then weighted draws."""
    order = rng.permutation(n_comps).tolist()
    seq = order[: min(n_comps, n_images)]
    if n_images > n_comps:
        weights = _composition_weights(n_comps)
        extra = rng.choice(n_comps, size=n_images - n_comps, p=weights)
        seq.extend(int(c) for c in extra)
    return seq[:n_images]


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Write images and JSONL files for the pretrain / train / test splits.

    Returns the manifest dict (also written to manifest.json). Regenerating
    with an identical config produces byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inv = build_inventory(cfg)
    inv.save(out / "inventory.json")
    rng = np.random.default_rng(cfg.seed)
    no = len(cfg.objects)
    counts = {}
    for split, n_images in (
        ("pretrain", cfg.pretrain_images),
        ("train", cfg.train_images),
        ("test", cfg.test_images),
    ):
        split_dir = out / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        ann_lines, det_lines, cap_lines = [], [], []
        comp_seq = _comp_sequence(rng, len(inv.compositions), n_images)
        for i, comp_id in enumerate(comp_seq):
            comp = inv.composition(comp_id)
            scene = generate_scene(rng, cfg, verb=comp.verb, object_label=comp.object)
            image_id = f"{split}_{i:05d}"
            Image.fromarray(scene.image).save(split_dir / "images" / f"{image_id}.bmp")
            header = {"image_id": image_id, "width": cfg.image_size, "height": cfg.image_size}
            ann_lines.append(
                json.dumps(
                    {**header, "boxes": scene.boxes, "labels": scene.labels, "hoi": scene.hois},
                    sort_keys=True,
                )
            )
            det_lines.append(
                json.dumps(
                    {**header, "detections": simulate_detections(rng, scene, cfg)},
                    sort_keys=True,
                )
            )
            cap_lines.append(json.dumps({"image_id": image_id, "caption": scene.caption},
                                        sort_keys=True))
        (split_dir / "annotations.jsonl").write_text("\n".join(ann_lines) + ("\n" if ann_lines else ""))
        (split_dir / "detections.jsonl").write_text("\n".join(det_lines) + ("\n" if det_lines else ""))
        (split_dir / "captions.jsonl").write_text("\n".join(cap_lines) + ("\n" if cap_lines else ""))
        counts[split] = n_images
    manifest = {
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "counts": counts,
        "num_compositions": len(inv.compositions),
        "num_objects": no + 1,
        "num_verbs": len(cfg.verbs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_image(path: str | Path):
    """Read a bitmap into a (3, H, W) float tensor in [0, 1]."""
    import torch

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_captions(path: str | Path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        if raw.strip():
            obj = json.loads(raw)
            out[str(obj["image_id"])] = str(obj["caption"])
    return out
