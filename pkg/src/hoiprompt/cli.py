"""Command-line pipeline: synth, pretrain, gsp-fit, split, train, predict,
eval, plot.

Configuration is a flat `key = value` text file; every key has a default
and any key can be overridden on the command line with --set key=value
(command line wins over file, file wins over defaults). Each subcommand
writes a manifest under <run_dir>/manifests recording the config hash,
input file hashes, and package version, so artifacts can be traced to the
exact configuration that made them.

Exit codes: 0 success, 1 usage error, 2 validation/configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .encoders import (
    DualEncoder,
    ImageEncoderConfig,
    PretrainConfig,
    TextEncoderConfig,
    WordTokenizer,
    build_dual_encoder,
    class_name_embeddings,
    load_checkpoint,
    pretrain_contrastive,
    save_checkpoint,
)
from .errors import ConfigError, HoiPromptError, NumericalError, ValidationError
from .evaluation import (
    evaluate,
    ground_truths_from_annotations,
    load_predictions,
    match_predictions,
    precision_recall_curve,
)
from .frontend import load_annotations, load_detections
from .geometry import (
    GlobalSpatialPatterns,
    fit_global_spatial_patterns,
    pairwise_spatial_features,
)
from .head import (
    FilterConfig,
    ModelConfig,
    PairInteractionModel,
    TrainConfig,
    predict_records,
    prepare_image,
    train_model,
)
from .synth import DEFAULT_OBJECTS, DEFAULT_VERBS, SynthConfig, generate_dataset, load_captions, load_image
from .zeroshot import HOIInventory, ZeroShotSplit, build_split, filter_training_annotations

RUN_ROOT_ENV = "HOIPROMPT_RUN_ROOT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    """Every tunable of the pipeline, flat, with validated defaults."""

    seed: int = 7
    run_dir: str = "runs/default"
    threads: int = 2

    # synthetic dataset
    num_verbs: int = 8
    num_objects: int = 8
    image_size: int = 64
    synth_pretrain_images: int = 512
    synth_train_images: int = 320
    synth_test_images: int = 160
    synth_distractors_max: int = 2
    synth_box_jitter: float = 0.05
    synth_score_noise: float = 0.08

    # dual encoder
    patch_size: int = 8
    encoder_width: int = 128
    image_blocks: int = 4
    text_blocks: int = 2
    encoder_heads: int = 4
    context_length: int = 32
    injection_blocks: str = ""  # csv of block indices; empty = all but block 0

    # contrastive pretraining
    pretrain_epochs: int = 30
    pretrain_batch: int = 32
    pretrain_lr: float = 2e-3
    pretrain_weight_decay: float = 1e-4

    # global spatial patterns
    gsp_k: int = 16

    # zero-shot split
    split_setting: str = "NF-UC"
    split_count: int = 12

    # prompts and scoring head
    prompt_dim: int = 64
    spi_depth: int = 2
    spi_heads: int = 4
    injector_heads: int = 4
    context_tokens: int = 16
    roi_resolution: int = 3
    score_exponent: float = 2.8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    lambda_cc: float = 1.0
    cc_classes: str = "all"  # consistency loss over: all | seen
    temperature_init: float = 10.0

    # interaction training
    train_epochs: int = 30
    train_batch: int = 8
    train_lr: float = 1e-3
    train_weight_decay: float = 1e-4

    # detection filtering
    score_thresh_person: float = 0.2
    score_thresh_object: float = 0.2
    max_detections: int = 15

    # prediction / evaluation
    max_predictions: int = 100
    eval_exclude_verbs: str = ""  # csv of verb ids excluded from mAP

    def validate(self) -> None:
        if self.num_verbs < 1 or self.num_verbs > len(DEFAULT_VERBS):
            raise ConfigError(f"num_verbs must be in 1..{len(DEFAULT_VERBS)}")
        if self.num_objects < 1 or self.num_objects > len(DEFAULT_OBJECTS):
            raise ConfigError(f"num_objects must be in 1..{len(DEFAULT_OBJECTS)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.cc_classes not in ("seen", "all"):
            raise ConfigError("cc_classes must be 'seen' or 'all'")
        for key in ("synth_pretrain_images", "synth_train_images", "synth_test_images",
                    "gsp_k", "max_predictions", "split_count"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")

    def injection_block_tuple(self) -> tuple[int, ...] | None:
        if not self.injection_blocks.strip():
            return None  # encoder default: every block except the first
        try:
            return tuple(int(tok) for tok in self.injection_blocks.split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigError(f"bad injection_blocks '{self.injection_blocks}'") from exc

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        canonical = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key '{key}'")
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: '{raw}'") from exc


def parse_config_file(path: str | Path) -> dict:
    """Read `key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw}'")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def load_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    values: dict = {}
    if config_path:
        values.update(parse_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, val = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, val)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "big") % (2**31)


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


class Paths:
    """Artifact locations inside the run directory."""

    def __init__(self, cfg: RunConfig):
        root = os.environ.get(RUN_ROOT_ENV, "")
        run_dir = Path(cfg.run_dir)
        if root and not run_dir.is_absolute():
            run_dir = Path(root) / run_dir
        self.run_dir = run_dir
        self.data = run_dir / "data"
        self.inventory = self.data / "inventory.json"
        self.encoder = run_dir / "encoder.pt"
        self.gsp = run_dir / "gsp.json"
        self.split = run_dir / "split.json"
        self.model = run_dir / "model.pt"
        self.train_log = run_dir / "train_log.jsonl"
        self.predictions = run_dir / "predictions.jsonl"
        self.predictions_manifest = run_dir / "predictions.manifest.json"
        self.report = run_dir / "report.json"
        self.report_txt = run_dir / "report.txt"
        self.plots = run_dir / "plots"
        self.manifests = run_dir / "manifests"
        self.diagnostics = run_dir / "diagnostics.json"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise ConfigError(
                f"missing {path.name}; run `hoiprompt {producer}` first (expected at {path})"
            )
        return path


def write_manifest(paths: Paths, cfg: RunConfig, subcommand: str,
                   inputs: list[Path], outputs: list[Path]) -> None:
    paths.manifests.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "version": f"hoiprompt-{__version__}",
        "config_hash": cfg.config_hash(),
        "config": dataclasses.asdict(cfg),
        "inputs": {str(p): file_hash(p) for p in inputs if p.exists()},
        "outputs": [str(p) for p in outputs],
    }
    (paths.manifests / f"{subcommand}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def make_synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(
        verbs=DEFAULT_VERBS[: cfg.num_verbs],
        objects=DEFAULT_OBJECTS[: cfg.num_objects],
        image_size=cfg.image_size,
        pretrain_images=cfg.synth_pretrain_images,
        train_images=cfg.synth_train_images,
        test_images=cfg.synth_test_images,
        distractors_max=cfg.synth_distractors_max,
        box_jitter=cfg.synth_box_jitter,
        score_noise=cfg.synth_score_noise,
        seed=derive_seed(cfg.seed, "synth"),
    )


def _filter_config(cfg: RunConfig) -> FilterConfig:
    return FilterConfig(
        score_thresh_person=cfg.score_thresh_person,
        score_thresh_object=cfg.score_thresh_object,
        max_detections=cfg.max_detections,
    )


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        prompt_dim=cfg.prompt_dim,
        spi_depth=cfg.spi_depth,
        spi_heads=cfg.spi_heads,
        injector_heads=cfg.injector_heads,
        context_tokens=cfg.context_tokens,
        roi_resolution=cfg.roi_resolution,
        score_exponent=cfg.score_exponent,
        focal_gamma=cfg.focal_gamma,
        focal_alpha=cfg.focal_alpha,
        lambda_cc=cfg.lambda_cc,
        temperature_init=cfg.temperature_init,
    )


def _load_split_images(paths: Paths, cfg: RunConfig, split_name: str,
                       with_annotations: bool):
    det_path = paths.require(paths.data / split_name / "detections.jsonl", "synth")
    inv = HOIInventory.load(paths.require(paths.inventory, "synth"))
    detections = load_detections(det_path, num_classes=inv.num_objects)
    annotations = None
    if with_annotations:
        ann_path = paths.require(paths.data / split_name / "annotations.jsonl", "synth")
        annotations = load_annotations(ann_path, num_classes=inv.num_objects,
                                       num_verbs=inv.num_verbs)
    return inv, detections, annotations


def _prepare_split(paths: Paths, cfg: RunConfig, split_name: str, model_inputs: dict,
                   annotations=None, trainable_mask=None):
    """Build PreparedImage list for a data split (sorted by image id)."""
    detections = model_inputs["detections"]
    embeddings = model_inputs["embeddings"]
    num_verbs = model_inputs["num_verbs"]
    prepared = []
    for image_id in sorted(detections):
        rec = detections[image_id]
        img = load_image(paths.data / split_name / "images" / f"{image_id}.bmp")
        ann = annotations.get(image_id) if annotations else None
        prepared.append(
            prepare_image(
                img,
                image_id,
                rec.size,
                rec.detections,
                embeddings,
                num_verbs,
                annotation=ann,
                trainable_mask=trainable_mask,
                filter_cfg=_filter_config(cfg),
            )
        )
    return prepared


def _build_model_from_checkpoint(path: Path) -> tuple[PairInteractionModel, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != 1:
        raise ValidationError(f"unsupported model checkpoint version {payload.get('format_version')}")
    image_cfg = ImageEncoderConfig(**{**payload["image_cfg"],
                                      "injection_blocks": tuple(payload["image_cfg"]["injection_blocks"])})
    text_cfg = TextEncoderConfig(**payload["text_cfg"])
    encoder = DualEncoder(image_cfg, text_cfg)
    tokenizer = WordTokenizer(payload["vocab"])
    patterns = GlobalSpatialPatterns(np.array(payload["patterns"]), seed=int(payload["patterns_seed"]))
    embeddings = {int(k): np.array(v) for k, v in payload["class_embeddings"].items()}
    model = PairInteractionModel(
        encoder,
        tokenizer,
        payload["verbs"],
        patterns,
        embeddings,
        ModelConfig(**payload["model_cfg"]),
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def cmd_synth(cfg: RunConfig, paths: Paths) -> int:
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    scfg = make_synth_config(cfg)
    manifest = generate_dataset(scfg, paths.data)
    write_manifest(paths, cfg, "synth", [], [paths.data / "manifest.json"])
    print(f"wrote {sum(manifest['counts'].values())} images across "
          f"{len(manifest['counts'])} splits to {paths.data}")
    return EXIT_OK


def _dataset_vocabulary(cfg: RunConfig) -> list[str]:
    words = {"a", "an", "person", "photo", "of", "object"}
    words.update(DEFAULT_VERBS[: cfg.num_verbs])
    words.update(DEFAULT_OBJECTS[: cfg.num_objects])
    return sorted(words)


def cmd_pretrain(cfg: RunConfig, paths: Paths) -> int:
    captions = load_captions(paths.require(paths.data / "pretrain" / "captions.jsonl", "synth"))
    if len(captions) < 2:
        raise ConfigError("pretraining needs at least 2 captioned images")
    tokenizer = WordTokenizer(_dataset_vocabulary(cfg))
    image_ids = sorted(captions)
    images = torch.stack(
        [load_image(paths.data / "pretrain" / "images" / f"{i}.bmp") for i in image_ids]
    )
    encoded = [tokenizer.encode(captions[i]) for i in image_ids]
    length = max(len(e) for e in encoded)
    ids = torch.full((len(encoded), length), tokenizer.pad_id, dtype=torch.long)
    for i, e in enumerate(encoded):
        ids[i, : len(e)] = torch.tensor(e, dtype=torch.long)

    image_cfg = ImageEncoderConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        width=cfg.encoder_width,
        blocks=cfg.image_blocks,
        heads=cfg.encoder_heads,
        injection_blocks=cfg.injection_block_tuple(),
    )
    text_cfg = TextEncoderConfig(
        vocab_size=len(tokenizer),
        context_length=cfg.context_length,
        width=cfg.encoder_width,
        blocks=cfg.text_blocks,
        heads=cfg.encoder_heads,
    )
    encoder = build_dual_encoder(image_cfg, text_cfg, seed=derive_seed(cfg.seed, "encoder-init"))
    caption_groups: dict[str, int] = {}
    group_ids = []
    for i in image_ids:
        group_ids.append(caption_groups.setdefault(captions[i], len(caption_groups)))
    history = pretrain_contrastive(
        encoder,
        images,
        ids,
        PretrainConfig(
            batch_size=cfg.pretrain_batch,
            epochs=cfg.pretrain_epochs,
            lr=cfg.pretrain_lr,
            weight_decay=cfg.pretrain_weight_decay,
            seed=derive_seed(cfg.seed, "pretrain"),
        ),
        group_ids=group_ids,
    )
    save_checkpoint(paths.encoder, encoder, tokenizer, extra={"config_hash": cfg.config_hash()})
    write_manifest(paths, cfg, "pretrain",
                   [paths.data / "pretrain" / "captions.jsonl"], [paths.encoder])
    first = history[0] if history else float("nan")
    tail = float(np.mean(history[-20:])) if history else float("nan")
    print(f"pretrained {len(history)} steps; loss {first:.3f} -> {tail:.3f} (tail mean); "
          f"saved {paths.encoder}")
    return EXIT_OK


def cmd_split(cfg: RunConfig, paths: Paths) -> int:
    inv, _, annotations = _load_split_images(paths, cfg, "train", with_annotations=True)
    inv = inv.count_frequencies(annotations)
    split = build_split(inv, cfg.split_setting, cfg.split_count, seed=derive_seed(cfg.seed, "split"))
    split.save(paths.split)
    write_manifest(paths, cfg, "split",
                   [paths.data / "train" / "annotations.jsonl", paths.inventory], [paths.split])
    print(f"split {split.setting}: {len(split.unseen)} unseen / {len(split.seen)} seen "
          f"compositions; saved {paths.split}")
    return EXIT_OK


def cmd_gsp_fit(cfg: RunConfig, paths: Paths) -> int:
    inv, _, annotations = _load_split_images(paths, cfg, "train", with_annotations=True)
    split = ZeroShotSplit.load(paths.require(paths.split, "split"))
    kept = filter_training_annotations(annotations, split, inv)
    feats = []
    for rec in kept.values():
        for hoi in rec.hois:
            feats.append(
                pairwise_spatial_features(rec.boxes[hoi.human_idx], rec.boxes[hoi.object_idx], rec.size)
            )
    if len(feats) < cfg.gsp_k:
        raise ConfigError(
            f"only {len(feats)} interactive pairs available for K={cfg.gsp_k} patterns"
        )
    gsp = fit_global_spatial_patterns(np.array(feats), cfg.gsp_k, seed=derive_seed(cfg.seed, "gsp"))
    gsp.save(paths.gsp)
    write_manifest(paths, cfg, "gsp-fit",
                   [paths.data / "train" / "annotations.jsonl", paths.split], [paths.gsp])
    print(f"fit {gsp.k} spatial patterns from {len(feats)} interactive pairs; saved {paths.gsp}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, paths: Paths) -> int:
    encoder, tokenizer, _ = load_checkpoint(paths.require(paths.encoder, "pretrain"))
    gsp = GlobalSpatialPatterns.load(paths.require(paths.gsp, "gsp-fit"))
    split = ZeroShotSplit.load(paths.require(paths.split, "split"))
    inv, detections, annotations = _load_split_images(paths, cfg, "train", with_annotations=True)
    annotations = filter_training_annotations(annotations, split, inv)

    embeddings = class_name_embeddings(encoder, tokenizer, inv.objects)
    trainable_mask = np.zeros((inv.num_verbs, inv.num_objects), dtype=bool)
    for comp in inv.compositions:
        if comp.comp_id in split.seen:
            trainable_mask[comp.verb, comp.object] = True

    torch.manual_seed(derive_seed(cfg.seed, "model-init"))
    model = PairInteractionModel(
        encoder, tokenizer, inv.verbs, gsp, embeddings, _model_config(cfg)
    )
    if cfg.cc_classes == "seen":
        model.set_cc_class_mask(trainable_mask.any(axis=1))

    inputs = {"detections": detections, "embeddings": embeddings, "num_verbs": inv.num_verbs}
    prepared = _prepare_split(paths, cfg, "train", inputs,
                              annotations=annotations, trainable_mask=trainable_mask)
    log_lines: list[str] = []

    def log_fn(entry: dict) -> None:
        log_lines.append(json.dumps(entry, sort_keys=True))

    history = train_model(
        model,
        prepared,
        TrainConfig(
            epochs=cfg.train_epochs,
            batch_size=cfg.train_batch,
            lr=cfg.train_lr,
            weight_decay=cfg.train_weight_decay,
            seed=derive_seed(cfg.seed, "train"),
        ),
        log_fn=log_fn,
    )
    paths.train_log.write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
    payload = {
        "format_version": 1,
        "image_cfg": dataclasses.asdict(encoder.image.cfg),
        "text_cfg": dataclasses.asdict(encoder.text.cfg),
        "vocab": tokenizer.words,
        "verbs": inv.verbs,
        "objects": inv.objects,
        "model_cfg": dataclasses.asdict(model.cfg),
        "patterns": gsp.centers.tolist(),
        "patterns_seed": gsp.seed,
        "class_embeddings": {str(k): v.tolist() for k, v in embeddings.items()},
        "state_dict": model.state_dict(),
        "config_hash": cfg.config_hash(),
        "split_hash": file_hash(paths.split),
    }
    torch.save(payload, str(paths.model))
    write_manifest(paths, cfg, "train",
                   [paths.encoder, paths.gsp, paths.split,
                    paths.data / "train" / "annotations.jsonl",
                    paths.data / "train" / "detections.jsonl"],
                   [paths.model, paths.train_log])
    print(f"trained {len(history)} steps; final loss {history[-1]['loss']:.4f}; "
          f"saved {paths.model}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, paths: Paths) -> int:
    model, payload = _build_model_from_checkpoint(paths.require(paths.model, "train"))
    inv, detections, _ = _load_split_images(paths, cfg, "test", with_annotations=False)
    embeddings = {int(k): np.array(v) for k, v in payload["class_embeddings"].items()}
    inputs = {"detections": detections, "embeddings": embeddings, "num_verbs": inv.num_verbs}
    prepared = _prepare_split(paths, cfg, "test", inputs)
    records = predict_records(
        model, prepared, inv.valid_matrix(), max_per_image=cfg.max_predictions,
        batch_size=cfg.train_batch,
    )
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    paths.predictions.write_text("\n".join(lines) + ("\n" if lines else ""))
    split_path = paths.require(paths.split, "split")
    paths.predictions_manifest.write_text(
        json.dumps(
            {
                "config_hash": cfg.config_hash(),
                "model_config_hash": payload.get("config_hash"),
                "split_hash": file_hash(split_path),
                "version": f"hoiprompt-{__version__}",
            },
            indent=2,
            sort_keys=True,
        )
    )
    write_manifest(paths, cfg, "predict",
                   [paths.model, paths.data / "test" / "detections.jsonl"],
                   [paths.predictions, paths.predictions_manifest])
    n_preds = sum(len(r["predictions"]) for r in records)
    print(f"wrote {n_preds} predictions over {len(records)} images to {paths.predictions}")
    return EXIT_OK


def _excluded_comp_ids(cfg: RunConfig, inv: HOIInventory) -> frozenset[int]:
    raw = cfg.eval_exclude_verbs.strip()
    if not raw:
        return frozenset()
    try:
        verbs = {int(tok) for tok in raw.split(",") if tok.strip()}
    except ValueError as exc:
        raise ConfigError(f"bad eval_exclude_verbs '{raw}'") from exc
    return frozenset(c.comp_id for c in inv.compositions if c.verb in verbs)


def cmd_eval(cfg: RunConfig, paths: Paths) -> int:
    split = ZeroShotSplit.load(paths.require(paths.split, "split"))
    inv, _, annotations = _load_split_images(paths, cfg, "test", with_annotations=True)
    pred_path = paths.require(paths.predictions, "predict")
    if paths.predictions_manifest.exists():
        manifest = json.loads(paths.predictions_manifest.read_text())
        current = file_hash(paths.split)
        if manifest.get("split_hash") != current:
            raise ValidationError(
                f"predictions were made against split {manifest.get('split_hash')} "
                f"but {paths.split} now hashes to {current}; re-run `hoiprompt predict`"
            )
    preds = load_predictions(pred_path, inv)
    gts = ground_truths_from_annotations(annotations, inv)
    metrics = evaluate(preds, gts, split, exclude_comp_ids=_excluded_comp_ids(cfg, inv))
    payload = metrics.to_payload(inv)
    payload["config"] = dataclasses.asdict(cfg)
    payload["config_hash"] = cfg.config_hash()
    payload["split_hash"] = file_hash(paths.split)
    payload["version"] = f"hoiprompt-{__version__}"
    paths.report.write_text(json.dumps(payload, indent=2, sort_keys=True))
    table = metrics.render_table()
    paths.report_txt.write_text(table + "\n")
    write_manifest(paths, cfg, "eval",
                   [paths.predictions, paths.split, paths.data / "test" / "annotations.jsonl"],
                   [paths.report, paths.report_txt])
    print(table)
    return EXIT_OK


def cmd_plot(cfg: RunConfig, paths: Paths) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = json.loads(paths.require(paths.report, "eval").read_text())
    paths.plots.mkdir(parents=True, exist_ok=True)

    labels = ["unseen", "seen", "full", "HM"]
    values = [report["map_unseen"], report["map_seen"], report["map_full"], report["hm"]]
    fig, ax = plt.subplots(figsize=(5, 4))
    bars = [0.0 if v is None else 100 * v for v in values]
    ax.bar(labels, bars, color=["#d95f02", "#1b9e77", "#7570b3", "#e7298a"])
    ax.set_ylabel("mAP x100")
    ax.set_title(f"{report['setting']} results")
    for x, v in enumerate(bars):
        ax.text(x, v, f"{v:.1f}", ha="center", va="bottom")
    fig.tight_layout()
    bar_path = paths.plots / "metrics.png"
    fig.savefig(bar_path, dpi=120)
    plt.close(fig)

    inv = HOIInventory.load(paths.require(paths.inventory, "synth"))
    _, _, annotations = _load_split_images(paths, cfg, "test", with_annotations=True)
    preds = load_predictions(paths.require(paths.predictions, "predict"), inv)
    gts = ground_truths_from_annotations(annotations, inv)
    matches = match_predictions(preds, gts)
    with_gt = sorted(
        (m for m in matches.values() if m.n_gt > 0), key=lambda m: -m.n_gt
    )[:8]
    fig, ax = plt.subplots(figsize=(5, 4))
    for m in with_gt:
        recall, precision = precision_recall_curve(m.tp_flags, m.n_gt)
        comp = inv.composition(m.comp_id)
        name = f"{inv.verbs[comp.verb]}/{inv.objects[comp.object]}"
        ax.plot(np.concatenate([[0.0], recall]), np.concatenate([[1.0], precision]), label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    ax.set_title("precision-recall (largest compositions)")
    fig.tight_layout()
    pr_path = paths.plots / "pr_curves.png"
    fig.savefig(pr_path, dpi=120)
    plt.close(fig)

    write_manifest(paths, cfg, "plot", [paths.report, paths.predictions], [bar_path, pr_path])
    print(f"wrote {bar_path} and {pr_path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "split": cmd_split,
    "gsp-fit": cmd_gsp_fit,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hoiprompt", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = load_config(args.config, args.set)
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(derive_seed(cfg.seed, args.subcommand))
    paths = Paths(cfg)
    try:
        return COMMANDS[args.subcommand](cfg, paths)
    except NumericalError as exc:
        paths.run_dir.mkdir(parents=True, exist_ok=True)
        paths.diagnostics.write_text(
            json.dumps(
                {"error": str(exc), "subcommand": args.subcommand,
                 "config": dataclasses.asdict(cfg)},
                indent=2,
            )
        )
        raise


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return run(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HoiPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
