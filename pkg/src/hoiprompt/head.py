"""Region feature extraction, pair scoring, losses, and the training loop.

Joins the pieces into one trainable model: detections become instance
priors and vision prompts, the frozen image tower produces a prompt-
conditioned feature map, ROI pooling over the token grid yields human /
object / union features per pair, and cosine logits against the language
prototypes are trained with a focal objective plus the prototype
consistency regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import DualEncoder, WordTokenizer
from .errors import ConfigError, NumericalError, ValidationError
from .frontend import (
    DEFAULT_MAX_DETECTIONS,
    DEFAULT_SCORE_THRESH_OBJECT,
    DEFAULT_SCORE_THRESH_PERSON,
    AnnotationRecord,
    Detection,
    HumanObjectPair,
    assemble_instance_prior,
    enumerate_pairs,
    filter_detections,
)
from .geometry import BBox, GlobalSpatialPatterns, ImageSize, iou
from .prompts import (
    LanguagePromptLearner,
    PromptInjector,
    VisionPromptBuilder,
    VisionPromptConfig,
    consistency_loss,
)

_NORM_EPS = 1e-8


def roi_align(
    grid: torch.Tensor,
    boxes: torch.Tensor,
    patch_size: int,
    resolution: int,
) -> torch.Tensor:
    """Bilinear ROI-align of pixel-space boxes over a token grid.

    grid is (h, w, d) with token (r, c) centered at pixel
    ((r + 0.5) * patch_size, (c + 0.5) * patch_size); boxes is (M, 4) xyxy
    in pixels. Each output bin averages an adaptive ceil(bin-size) lattice
    of bilinear samples, so a box spanning the whole grid at resolution 1
    averages every token exactly. Returns (M, resolution, resolution, d).
    """
    if grid.ndim != 3:
        raise ValidationError(f"feature grid must be (h, w, d), got {tuple(grid.shape)}")
    if resolution < 1:
        raise ConfigError(f"roi resolution must be >= 1, got {resolution}")
    h, w, d = grid.shape
    boxes = boxes.to(grid.dtype)
    m = boxes.shape[0]
    r = resolution
    if m == 0:
        return grid.new_zeros((0, r, r, d))
    tb = boxes / patch_size  # token units
    bin_w = (tb[:, 2] - tb[:, 0]) / r
    bin_h = (tb[:, 3] - tb[:, 1]) / r
    if bool((bin_w <= 0).any()) or bool((bin_h <= 0).any()):
        raise ValidationError("roi boxes must have positive extent")
    n_x = torch.clamp(torch.ceil(bin_w), min=1).long()
    n_y = torch.clamp(torch.ceil(bin_h), min=1).long()

    out = grid.new_zeros((m, r, r, d))
    # group boxes that need the same sampling lattice so each group vectorizes
    keys = {}
    for i in range(m):
        keys.setdefault((int(n_y[i]), int(n_x[i])), []).append(i)
    for (ny, nx), idx_list in keys.items():
        idx = torch.tensor(idx_list, dtype=torch.long, device=grid.device)
        g = idx.numel()
        # sample coordinates: bin j, sub-sample s -> origin + (j + (s+.5)/n) * bin
        off_y = (torch.arange(r, device=grid.device, dtype=grid.dtype).repeat_interleave(ny)
                 + (torch.arange(ny, device=grid.device, dtype=grid.dtype) + 0.5).repeat(r) / ny)
        off_x = (torch.arange(r, device=grid.device, dtype=grid.dtype).repeat_interleave(nx)
                 + (torch.arange(nx, device=grid.device, dtype=grid.dtype) + 0.5).repeat(r) / nx)
        ys = tb[idx, 1, None] + off_y[None, :] * bin_h[idx, None]  # (g, r*ny)
        xs = tb[idx, 0, None] + off_x[None, :] * bin_w[idx, None]  # (g, r*nx)
        gy = torch.clamp(ys - 0.5, 0.0, h - 1.0)
        gx = torch.clamp(xs - 0.5, 0.0, w - 1.0)
        y0 = gy.floor().long().clamp(max=h - 1)
        x0 = gx.floor().long().clamp(max=w - 1)
        y1 = (y0 + 1).clamp(max=h - 1)
        x1 = (x0 + 1).clamp(max=w - 1)
        fy = (gy - y0.to(grid.dtype)).unsqueeze(-1)  # (g, r*ny, 1)
        fx = (gx - x0.to(grid.dtype)).unsqueeze(-1)  # (g, r*nx, 1)
        v00 = grid[y0[:, :, None], x0[:, None, :]]  # (g, r*ny, r*nx, d)
        v01 = grid[y0[:, :, None], x1[:, None, :]]
        v10 = grid[y1[:, :, None], x0[:, None, :]]
        v11 = grid[y1[:, :, None], x1[:, None, :]]
        top = v00 * (1 - fx).unsqueeze(1) + v01 * fx.unsqueeze(1)
        bot = v10 * (1 - fx).unsqueeze(1) + v11 * fx.unsqueeze(1)
        vals = top * (1 - fy).unsqueeze(2) + bot * fy.unsqueeze(2)
        pooled = vals.reshape(g, r, ny, r, nx, d).mean(dim=(2, 4))
        out[idx] = pooled
    return out


def pair_logits(
    f_hum: torch.Tensor,
    f_obj: torch.Tensor,
    f_inter: torch.Tensor,
    alphas: torch.Tensor,
    prototypes: torch.Tensor,
) -> torch.Tensor:
    """Cosine logits of fused region features against action prototypes.

    fused = a_hum * f_hum + a_obj * f_obj + a_inter * f_inter, safely
    l2-normalized (a zero fusion yields zero logits), then dotted with the
    unit-norm prototype rows. Shapes: features (P, d), alphas (3,),
    prototypes (A, d); output (P, A).
    """
    if f_hum.shape != f_obj.shape or f_hum.shape != f_inter.shape:
        raise ValidationError("region feature shapes disagree")
    if f_hum.shape[-1] != prototypes.shape[-1]:
        raise ValidationError(
            f"feature width {f_hum.shape[-1]} does not match prototype width "
            f"{prototypes.shape[-1]}"
        )
    fused = alphas[0] * f_hum + alphas[1] * f_obj + alphas[2] * f_inter
    fused = fused / (fused.norm(dim=-1, keepdim=True) + _NORM_EPS)
    return fused @ prototypes.t()


def final_score(
    s_ho: torch.Tensor,
    s_h: torch.Tensor | float,
    s_o: torch.Tensor | float,
    score_exponent: float,
    temperature: torch.Tensor | float,
) -> torch.Tensor:
    """Inference score: sigmoid(temperature * logits) * (s_h * s_o)^exponent.

    The exponent must exceed 1; it suppresses pairs whose detector
    confidences are not both near certain.
    """
    if score_exponent <= 1.0:
        raise ConfigError(f"score exponent must be > 1, got {score_exponent}")
    s_h = torch.as_tensor(s_h, dtype=s_ho.dtype, device=s_ho.device)
    s_o = torch.as_tensor(s_o, dtype=s_ho.dtype, device=s_ho.device)
    return torch.sigmoid(temperature * s_ho) * s_h**score_exponent * s_o**score_exponent


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Binary focal loss, summed over classes and averaged over pairs.

    With gamma = 0 and alpha = 0.5 this is half the binary cross-entropy.
    `mask` zeroes the contribution of class slots that must not be
    supervised (held-out compositions).
    """
    if logits.shape != targets.shape:
        raise ValidationError(
            f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree"
        )
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    p = torch.sigmoid(logits)
    log_p = F.logsigmoid(logits)
    log_not_p = F.logsigmoid(-logits)
    per = targets * (-alpha) * (1 - p) ** gamma * log_p + (1 - targets) * (
        -(1 - alpha)
    ) * p**gamma * log_not_p
    if mask is not None:
        per = per * mask
    return per.sum(dim=-1).mean()


def total_loss(l_cls: torch.Tensor, l_cc: torch.Tensor, lambda_cc: float) -> torch.Tensor:
    """Weighted training objective: classification plus consistency."""
    if lambda_cc < 0:
        raise ConfigError(f"consistency weight must be >= 0, got {lambda_cc}")
    return l_cls + lambda_cc * l_cc


def build_pair_targets(
    pairs: list[HumanObjectPair],
    annotation: AnnotationRecord,
    num_verbs: int,
    iou_thresh: float = 0.5,
) -> np.ndarray:
    """Multi-hot verb targets: a pair carries verb v when it matches an
    annotated interactive pair (both IoUs above threshold, object class
    equal) labeled with v."""
    targets = np.zeros((len(pairs), num_verbs), dtype=np.float32)
    for pi, pair in enumerate(pairs):
        for hoi in annotation.hois:
            if pair.object.label != annotation.labels[hoi.object_idx]:
                continue
            if iou(pair.human.bbox, annotation.boxes[hoi.human_idx]) <= iou_thresh:
                continue
            if iou(pair.object.bbox, annotation.boxes[hoi.object_idx]) <= iou_thresh:
                continue
            targets[pi, hoi.verb] = 1.0
    return targets


def verb_mask_for_pairs(pairs: list[HumanObjectPair], trainable: np.ndarray) -> np.ndarray:
    """Per-pair supervision mask from a (num_verbs, num_objects) bool table."""
    mask = np.zeros((len(pairs), trainable.shape[0]), dtype=np.float32)
    for pi, pair in enumerate(pairs):
        mask[pi] = trainable[:, pair.object.label].astype(np.float32)
    return mask


@dataclass
class PreparedImage:
    """Everything the model needs for one image, assembled once."""

    image_id: str
    image: torch.Tensor  # (3, H, W) float in [0, 1]
    size: ImageSize
    detections: list[Detection]
    pairs: list[HumanObjectPair]
    prior: np.ndarray  # (N, 5 + d_e)
    human_boxes: np.ndarray  # (P, 4) clipped
    object_boxes: np.ndarray
    union_boxes: np.ndarray
    det_scores: np.ndarray  # (P, 2) detector confidences (human, object)
    targets: Optional[np.ndarray] = None  # (P, A)
    loss_mask: Optional[np.ndarray] = None  # (P, A)
    trainable: bool = False


@dataclass(frozen=True)
class FilterConfig:
    score_thresh_person: float = DEFAULT_SCORE_THRESH_PERSON
    score_thresh_object: float = DEFAULT_SCORE_THRESH_OBJECT
    max_detections: int = DEFAULT_MAX_DETECTIONS


def prepare_image(
    image: torch.Tensor,
    image_id: str,
    size: ImageSize,
    detections: list[Detection],
    embeddings: dict[int, np.ndarray],
    num_verbs: int,
    annotation: Optional[AnnotationRecord] = None,
    trainable_mask: Optional[np.ndarray] = None,
    filter_cfg: FilterConfig = FilterConfig(),
) -> PreparedImage:
    """Filter detections, enumerate pairs, and assemble model inputs."""
    kept = filter_detections(
        detections,
        score_thresh_person=filter_cfg.score_thresh_person,
        score_thresh_object=filter_cfg.score_thresh_object,
        max_detections=filter_cfg.max_detections,
    )
    pairs = enumerate_pairs(kept)
    prior = assemble_instance_prior(kept, embeddings, size)

    def boxes_of(select: Callable[[HumanObjectPair], BBox]) -> np.ndarray:
        out = np.zeros((len(pairs), 4), dtype=np.float64)
        for i, pr in enumerate(pairs):
            out[i] = select(pr).clip(size).as_list()
        return out

    targets = None
    loss_mask = None
    trainable = False
    if annotation is not None:
        targets = build_pair_targets(pairs, annotation, num_verbs)
        trainable = len(annotation.hois) > 0
        if trainable_mask is not None:
            loss_mask = verb_mask_for_pairs(pairs, trainable_mask)
    return PreparedImage(
        image_id=image_id,
        image=image,
        size=size,
        detections=kept,
        pairs=pairs,
        prior=prior,
        human_boxes=boxes_of(lambda p: p.human.bbox),
        object_boxes=boxes_of(lambda p: p.object.bbox),
        union_boxes=boxes_of(lambda p: p.union),
        det_scores=np.array(
            [[p.human.score, p.object.score] for p in pairs], dtype=np.float64
        ).reshape(len(pairs), 2),
        targets=targets,
        loss_mask=loss_mask,
        trainable=trainable,
    )


@dataclass(frozen=True)
class ModelConfig:
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
    temperature_init: float = 10.0
    logit_offset_init: float = -0.5

    def __post_init__(self):
        if self.score_exponent <= 1.0:
            raise ConfigError(f"score exponent must be > 1, got {self.score_exponent}")
        if self.temperature_init <= 0.0:
            raise ConfigError("temperature must start positive")
        if self.lambda_cc < 0.0:
            raise ConfigError("consistency weight must be >= 0")


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (sum Pi, A) raw cosine logits
    prototypes: torch.Tensor  # (A, d)
    pair_counts: list[int]


class PairInteractionModel(nn.Module):
    """Frozen dual encoder plus the trainable prompt and scoring pieces."""

    def __init__(
        self,
        encoder: DualEncoder,
        tokenizer: WordTokenizer,
        verbs: list[str],
        patterns: GlobalSpatialPatterns,
        class_embeddings: dict[int, np.ndarray],
        cfg: ModelConfig = ModelConfig(),
    ):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder
        self.encoder.freeze()
        width = encoder.width
        d_e = next(iter(class_embeddings.values())).shape[-1]
        if d_e != width:
            raise ConfigError(f"class embedding width {d_e} != encoder width {width}")
        self.class_embeddings = {int(k): np.asarray(v, dtype=np.float64) for k, v in class_embeddings.items()}
        self.prompt_builder = VisionPromptBuilder(
            VisionPromptConfig(
                prior_dim=5 + width,
                prompt_dim=cfg.prompt_dim,
                heads=cfg.spi_heads,
                depth=cfg.spi_depth,
            )
        )
        self.injectors = nn.ModuleDict(
            {
                str(i): PromptInjector(width, cfg.prompt_dim, heads=cfg.injector_heads)
                for i in encoder.image.cfg.injection_blocks
            }
        )
        self.language = LanguagePromptLearner(
            tokenizer,
            verbs,
            context_tokens=cfg.context_tokens,
            width=width,
            context_length=encoder.text.cfg.context_length,
        )
        self.region_proj = nn.Linear(width, width)
        nn.init.eye_(self.region_proj.weight)
        nn.init.zeros_(self.region_proj.bias)
        self.alphas = nn.Parameter(torch.full((3,), 1.0 / 3.0))
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.temperature_init)))
        # scalar offset on the cosine logits, shared across classes so it
        # stays calibrated for verbs never supervised; without it a sigmoid
        # over cosines cannot express "no interaction" for any pair
        self.logit_offset = nn.Parameter(torch.tensor(cfg.logit_offset_init))
        self.register_buffer(
            "patterns", torch.tensor(patterns.centers, dtype=torch.float32)
        )
        self.register_buffer("cc_class_mask", torch.ones(len(verbs), dtype=torch.bool))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_tau.exp()

    @property
    def num_verbs(self) -> int:
        return self.language.num_actions

    @property
    def dtype(self) -> torch.dtype:
        return self.region_proj.weight.dtype

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_cc_class_mask(self, mask: Optional[np.ndarray]) -> None:
        """Restrict the consistency loss to the given verb classes."""
        if mask is None:
            self.cc_class_mask = torch.ones(self.num_verbs, dtype=torch.bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (self.num_verbs,):
                raise ValidationError(f"class mask must have shape ({self.num_verbs},)")
            self.cc_class_mask = torch.tensor(mask, dtype=torch.bool)

    def _batched_prompts(
        self, batch: list[PreparedImage]
    ) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        counts = [im.prior.shape[0] for im in batch]
        n_max = max(counts) if counts else 0
        if n_max == 0:
            return None, None
        prior_dim = self.prompt_builder.cfg.prior_dim
        priors = torch.zeros(len(batch), n_max, prior_dim, dtype=self.dtype)
        pad = torch.ones(len(batch), n_max, dtype=torch.bool)
        for i, im in enumerate(batch):
            n = im.prior.shape[0]
            if n:
                priors[i, :n] = torch.as_tensor(im.prior, dtype=self.dtype)
                pad[i, :n] = False
        prompts = self.prompt_builder(priors, self.patterns.to(self.dtype), pad)
        return prompts, pad

    def forward(self, batch: list[PreparedImage]) -> ForwardOutput:
        if not batch:
            raise ValidationError("empty batch")
        images = torch.stack([im.image for im in batch]).to(self.dtype)
        prompts, pad = self._batched_prompts(batch)
        inject = None
        if prompts is not None:
            def inject(tokens: torch.Tensor, block: int) -> torch.Tensor:
                return self.injectors[str(block)](tokens, prompts, pad)

        fmap = self.encoder.encode_image(images, inject=inject)
        prototypes = self.language.build(self.encoder.text)
        patch = fmap.patch_size
        all_logits = []
        for i, im in enumerate(batch):
            p = len(im.pairs)
            if p == 0:
                all_logits.append(prototypes.new_zeros((0, self.num_verbs)))
                continue
            grid = fmap.grid[i]
            feats = []
            for arr in (im.human_boxes, im.object_boxes, im.union_boxes):
                boxes = torch.as_tensor(arr, dtype=self.dtype)
                pooled = roi_align(grid, boxes, patch, self.cfg.roi_resolution)
                pooled = pooled.mean(dim=(1, 2))
                feats.append(self.region_proj(self.encoder.image_proj(pooled)))
            all_logits.append(pair_logits(feats[0], feats[1], feats[2], self.alphas, prototypes))
        logits = torch.cat(all_logits, dim=0) if all_logits else prototypes.new_zeros((0, self.num_verbs))
        logits = logits + self.logit_offset
        return ForwardOutput(logits=logits, prototypes=prototypes, pair_counts=[len(im.pairs) for im in batch])

    def compute_losses(self, batch: list[PreparedImage], out: ForwardOutput) -> dict[str, torch.Tensor]:
        targets, masks = [], []
        for im in batch:
            p = len(im.pairs)
            if im.targets is None:
                raise ValidationError(f"image {im.image_id} has no training targets")
            targets.append(torch.as_tensor(im.targets, dtype=self.dtype))
            if im.loss_mask is not None:
                masks.append(torch.as_tensor(im.loss_mask, dtype=self.dtype))
            else:
                masks.append(torch.ones(p, self.num_verbs, dtype=self.dtype))
        target_mat = (
            torch.cat(targets, dim=0) if targets else out.logits.new_zeros((0, self.num_verbs))
        )
        mask_mat = torch.cat(masks, dim=0) if masks else None
        l_cls = focal_loss(
            self.temperature * out.logits,
            target_mat,
            gamma=self.cfg.focal_gamma,
            alpha=self.cfg.focal_alpha,
            mask=mask_mat,
        )
        human = self.language.human_prototypes(self.encoder.text)
        l_cc = consistency_loss(out.prototypes, human, class_mask=self.cc_class_mask)
        loss = total_loss(l_cls, l_cc, self.cfg.lambda_cc)
        return {"loss": loss, "cls": l_cls, "cc": l_cc}

    @torch.no_grad()
    def predict_scores(self, batch: list[PreparedImage]) -> list[np.ndarray]:
        """Final per-pair action scores (detector-confidence suppressed)."""
        self.eval()
        out = self.forward(batch)
        scores = []
        offset = 0
        for im, count in zip(batch, out.pair_counts):
            logits = out.logits[offset : offset + count]
            offset += count
            if count == 0:
                scores.append(np.zeros((0, self.num_verbs), dtype=np.float64))
                continue
            sh = torch.as_tensor(im.det_scores[:, 0:1], dtype=self.dtype)
            so = torch.as_tensor(im.det_scores[:, 1:2], dtype=self.dtype)
            final = final_score(logits, sh, so, self.cfg.score_exponent, self.temperature)
            scores.append(final.double().cpu().numpy())
        return scores


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def train_model(
    model: PairInteractionModel,
    images: list[PreparedImage],
    cfg: TrainConfig,
    log_fn: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Optimize the trainable parameters on annotated images.

    Images without surviving interaction annotations are skipped; the
    optimizer is decoupled-weight-decay Adam with a cosine learning-rate
    schedule. Returns the per-step loss history.
    """
    usable = [im for im in images if im.trainable and len(im.pairs) > 0]
    if not usable:
        raise ConfigError("no trainable images: every image lacks interaction annotations")
    params = model.trainable_parameters()
    # calibration scalars (fusion weights, temperature, logit offset) move
    # faster than the prompt tensors
    scalars = [p for p in params if p.numel() <= 4]
    tensors = [p for p in params if p.numel() > 4]
    opt = torch.optim.AdamW(
        [
            {"params": tensors, "lr": cfg.lr},
            {"params": scalars, "lr": 10.0 * cfg.lr, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    steps_per_epoch = math.ceil(len(usable) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    history: list[dict] = []
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(usable), generator=gen).tolist()
        for start in range(0, len(usable), cfg.batch_size):
            batch = [usable[i] for i in order[start : start + cfg.batch_size]]
            out = model(batch)
            losses = model.compute_losses(batch, out)
            if not torch.isfinite(losses["loss"]):
                raise NumericalError(
                    f"non-finite loss at step {step}: "
                    f"cls={losses['cls'].item()}, cc={losses['cc'].item()}"
                )
            opt.zero_grad(set_to_none=True)
            losses["loss"].backward()
            opt.step()
            sched.step()
            entry = {
                "step": step,
                "epoch": epoch,
                "loss": losses["loss"].item(),
                "cls": losses["cls"].item(),
                "cc": losses["cc"].item(),
                "lr": float(sched.get_last_lr()[0]),
            }
            history.append(entry)
            if log_fn is not None:
                log_fn(entry)
            step += 1
    model.eval()
    return history


def predict_records(
    model: PairInteractionModel,
    images: list[PreparedImage],
    valid_matrix: np.ndarray,
    max_per_image: int = 100,
    batch_size: int = 8,
    verb_permutation: Optional[np.ndarray] = None,
) -> list[dict]:
    """Run inference and emit per-image prediction payloads.

    One record per (pair, verb) whose (verb, object-label) composition is
    valid, capped at the top `max_per_image` by final score.
    `verb_permutation` reassigns score columns to verbs before emission;
    it exists for shuffled-classifier control experiments.
    """
    if verb_permutation is not None:
        verb_permutation = np.asarray(verb_permutation, dtype=np.int64)
        if sorted(verb_permutation.tolist()) != list(range(model.num_verbs)):
            raise ValidationError("verb_permutation must permute 0..num_verbs-1")
    records = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        scores = model.predict_scores(chunk)
        for im, mat in zip(chunk, scores):
            if verb_permutation is not None:
                mat = mat[:, verb_permutation]
            entries = []
            for pi, pair in enumerate(im.pairs):
                obj_label = pair.object.label
                for verb in range(model.num_verbs):
                    if not valid_matrix[verb, obj_label]:
                        continue
                    entries.append(
                        {
                            "human_bbox": [float(x) for x in im.human_boxes[pi]],
                            "object_bbox": [float(x) for x in im.object_boxes[pi]],
                            "object": int(obj_label),
                            "verb": int(verb),
                            "score": float(mat[pi, verb]),
                        }
                    )
            entries.sort(key=lambda e: (-e["score"], e["verb"], e["object"], e["human_bbox"]))
            records.append({"image_id": im.image_id, "predictions": entries[:max_per_image]})
    return records
