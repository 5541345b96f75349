"""Toy dual encoder: patch-transformer image tower, token-transformer text
tower, and a contrastive pretraining loop that aligns them in one embedding
space.

The towers are deliberately small (64x64 images, width 128) but expose the
same surfaces a large pretrained dual encoder would: per-block feature maps
with prompt-injection hooks on the image side, and soft-token input on the
text side so learnable prompt vectors can be prepended to word embeddings.
After pretraining the towers are frozen; downstream training only touches
prompt and head parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ValidationError

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
# WordTokenizer pins the special tokens to the first four ids
PAD_TOKEN_ID, START_TOKEN_ID, END_TOKEN_ID, UNK_TOKEN_ID = 0, 1, 2, 3
MAX_LOGIT_SCALE = math.log(100.0)


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    injection_blocks: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.injection_blocks is None:
            object.__setattr__(self, "injection_blocks", tuple(range(1, self.blocks)))
        else:
            object.__setattr__(self, "injection_blocks", tuple(sorted(set(self.injection_blocks))))
        for b in self.injection_blocks:
            if not 0 <= b < self.blocks:
                raise ConfigError(f"injection block {b} outside 0..{self.blocks - 1}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 64
    context_length: int = 32
    width: int = 128
    blocks: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.vocab_size < 5:
            raise ConfigError("vocabulary must at least hold the special tokens")


class WordTokenizer:
    """Whitespace word-level tokenizer with fixed special tokens."""

    def __init__(self, words: Sequence[str]):
        self.words = [PAD, START, END, UNK] + sorted(set(words) - {PAD, START, END, UNK})
        self.vocab = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.vocab[PAD]
        self.start_id = self.vocab[START]
        self.end_id = self.vocab[END]
        self.unk_id = self.vocab[UNK]

    def __len__(self) -> int:
        return len(self.words)

    def encode_words(self, text: str) -> list[int]:
        return [self.vocab.get(w, self.unk_id) for w in text.lower().split()]

    def encode(self, text: str) -> list[int]:
        return [self.start_id] + self.encode_words(text) + [self.end_id]

    def decode(self, ids: Iterable[int]) -> str:
        keep = [self.words[i] for i in ids if i not in (self.pad_id, self.start_id, self.end_id)]
        return " ".join(keep)


class MultiheadAttention(nn.Module):
    """Plain scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        # query (B, Lq, D), key/value (B, Lk, D), mask (B, Lk) True = ignore
        b, lq, _ = query.shape
        lk = key.shape[1]
        q = self.q_proj(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block.

    With `gated_residual`, each residual branch is scaled by a learnable
    scalar starting at zero, so a freshly initialized stack is the
    identity: shallow linear features carry the early training signal and
    the blocks fade in as their gains grow.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, gated_residual: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio))
        if gated_residual:
            self.attn_gain = nn.Parameter(torch.zeros(()))
            self.mlp_gain = nn.Parameter(torch.zeros(()))
        else:
            self.attn_gain = None
            self.mlp_gain = None

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm1(x)
        a = self.attn(h, h, h, key_padding_mask=key_padding_mask)
        x = x + (a if self.attn_gain is None else self.attn_gain * a)
        m = self.mlp(self.norm2(x))
        x = x + (m if self.mlp_gain is None else self.mlp_gain * m)
        return x


@dataclass
class FeatureMap:
    """Token grid from the image tower plus the pixel geometry of each token."""

    grid: torch.Tensor  # (B, h, w, d)
    patch_size: int

    def __post_init__(self):
        if self.grid.ndim != 4:
            raise ValidationError(f"feature grid must be (B, h, w, d), got {tuple(self.grid.shape)}")

    @property
    def tokens(self) -> torch.Tensor:
        b, h, w, d = self.grid.shape
        return self.grid.reshape(b, h * w, d)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (self.grid.shape[1], self.grid.shape[2])


InjectFn = Callable[[torch.Tensor, int], torch.Tensor]


class ImageEncoder(nn.Module):
    """Patch transformer producing a spatial token grid.

    An optional `inject` callable is applied to the token sequence after
    every block listed in the config's injection_blocks; with no callable
    the plain backbone features come back.
    """

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.width, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        n_tokens = cfg.grid_size * cfg.grid_size
        self.pos_embed = nn.Parameter(torch.empty(1, n_tokens, cfg.width).normal_(std=0.02))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio, gated_residual=True)
            for _ in range(cfg.blocks)
        )
        self.norm = nn.LayerNorm(cfg.width)

    def forward(self, images: torch.Tensor, inject: Optional[InjectFn] = None) -> FeatureMap:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValidationError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ValidationError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} images, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        x = self.patch_embed(images)  # (B, d, g, g)
        b, d, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for i, block in enumerate(self.blocks):
            x = block(x)
            if inject is not None and i in self.cfg.injection_blocks:
                x = inject(x, i)
        x = self.norm(x)
        return FeatureMap(grid=x.reshape(b, gh, gw, d), patch_size=self.cfg.patch_size)


class TextEncoder(nn.Module):
    """Token transformer summarizing a sequence at its end-of-sequence slot.

    Input can be vocabulary ids or pre-built embeddings, so soft prompt
    vectors can be spliced between real tokens.
    """

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.empty(1, cfg.context_length, cfg.width).normal_(std=0.02))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio, gated_residual=True)
            for _ in range(cfg.blocks)
        )
        self.norm = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.width, bias=False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Raw token embeddings, no positions added."""
        return self.token_embed(ids)

    def forward_embedded(
        self,
        embeddings: torch.Tensor,
        eos_positions: torch.Tensor,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        # embeddings (B, L, d); eos_positions (B,) index of the summary slot
        if embeddings.ndim != 3:
            raise ValidationError(f"expected (B, L, d) embeddings, got {tuple(embeddings.shape)}")
        b, length, _ = embeddings.shape
        if length > self.cfg.context_length:
            raise ValidationError(
                f"sequence length {length} exceeds context length {self.cfg.context_length}"
            )
        # the summary slot's input starts as the mean of the preceding
        # embeddings, so it reads the sequence content even while the
        # zero-gated blocks are still near identity
        idx = torch.arange(length, device=embeddings.device)
        before = idx[None, :] < eos_positions[:, None]
        counts = before.sum(dim=1).clamp(min=1).to(embeddings.dtype)
        bag = (embeddings * before[:, :, None].to(embeddings.dtype)).sum(dim=1) / counts[:, None]
        rows = torch.arange(b, device=embeddings.device)
        x = embeddings.clone()
        x[rows, eos_positions] = x[rows, eos_positions] + bag
        x = x + self.pos_embed[:, :length]
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding_mask)
        x = self.norm(x)
        summary = x[rows, eos_positions]
        return self.proj(summary)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Encode id sequences (B, L); the end token must appear in each row."""
        if ids.ndim == 1:
            ids = ids.unsqueeze(0)
        is_end = ids == END_TOKEN_ID
        if not bool(is_end.any(dim=1).all()):
            raise ValidationError("every token sequence needs an end token")
        eos = is_end.float().argmax(dim=1)
        return self.forward_embedded(self.embed_tokens(ids), eos)


class DualEncoder(nn.Module):
    """Image and text towers plus the pooled-embedding projections that tie
    them into one space."""

    def __init__(self, image_cfg: ImageEncoderConfig, text_cfg: TextEncoderConfig):
        super().__init__()
        self.image = ImageEncoder(image_cfg)
        self.text = TextEncoder(text_cfg)
        if image_cfg.width != text_cfg.width:
            raise ConfigError("image and text towers must share one embedding width")
        self.image_proj = nn.Linear(image_cfg.width, image_cfg.width, bias=False)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))

    @property
    def width(self) -> int:
        return self.image.cfg.width

    def encode_image(self, images: torch.Tensor, inject: Optional[InjectFn] = None) -> FeatureMap:
        return self.image(images, inject=inject)

    def pooled_image_embedding(self, feature_map: FeatureMap) -> torch.Tensor:
        return self.image_proj(feature_map.tokens.mean(dim=1))

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text(ids)

    def contrastive_loss(self, images: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """Symmetric batch-contrastive objective between matched pairs."""
        img = F.normalize(self.pooled_image_embedding(self.encode_image(images)), dim=-1)
        txt = F.normalize(self.encode_text(token_ids), dim=-1)
        logits = self.logit_scale.exp() * img @ txt.t()
        labels = torch.arange(img.shape[0], device=img.device)
        return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)


def build_dual_encoder(
    image_cfg: ImageEncoderConfig,
    text_cfg: TextEncoderConfig,
    seed: int,
) -> DualEncoder:
    """Construct a dual encoder with weights fixed by `seed`."""
    torch.manual_seed(seed)
    return DualEncoder(image_cfg, text_cfg)


@dataclass
class PretrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    # augmentation: random integer shifts and fresh pixel noise each step,
    # so the encoder cannot key on absolute position or static pixels
    shift_max: int = 3
    noise_std: float = 0.02
    background_fill: float = 232.0 / 255.0


def augment_images(
    images: torch.Tensor,
    gen: torch.Generator,
    shift_max: int,
    noise_std: float,
    fill: float,
) -> torch.Tensor:
    """Per-image random translation (background-filled) plus pixel noise."""
    out = images
    if shift_max > 0:
        b, _, h, w = images.shape
        shifts = torch.randint(-shift_max, shift_max + 1, (b, 2), generator=gen)
        padded = F.pad(images, (shift_max,) * 4, value=fill)
        rows = []
        for i in range(b):
            dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
            rows.append(padded[i, :, shift_max + dy : shift_max + dy + h,
                               shift_max + dx : shift_max + dx + w])
        out = torch.stack(rows)
    if noise_std > 0:
        noise = torch.empty_like(out).normal_(0.0, noise_std, generator=gen)
        out = (out + noise).clamp(0.0, 1.0)
    return out


def _epoch_batches(
    n: int,
    batch_size: int,
    gen: torch.Generator,
    group_ids: Optional[Sequence[int]],
) -> list[torch.Tensor]:
    """Batch index plan for one epoch.

    With group ids (one per pair, e.g. caption identity), each batch draws
    from distinct groups as far as possible, so the contrastive targets
    stay well-posed even when many images share a caption.
    """
    if group_ids is None:
        order = torch.randperm(n, generator=gen)
        return [order[s : s + batch_size] for s in range(0, n, batch_size)]
    pools: dict[int, list[int]] = {}
    for i, g in enumerate(group_ids):
        pools.setdefault(int(g), []).append(i)
    for g in pools:
        perm = torch.randperm(len(pools[g]), generator=gen).tolist()
        pools[g] = [pools[g][i] for i in perm]
    batches = []
    while any(pools.values()):
        eligible = sorted(g for g, items in pools.items() if items)
        eligible = [eligible[i] for i in torch.randperm(len(eligible), generator=gen).tolist()]
        batch = [pools[g].pop() for g in eligible[:batch_size]]
        batches.append(torch.tensor(batch, dtype=torch.long))
    return batches


def pretrain_contrastive(
    encoder: DualEncoder,
    images: torch.Tensor,
    token_ids: torch.Tensor,
    cfg: PretrainConfig,
    group_ids: Optional[Sequence[int]] = None,
) -> list[float]:
    """Train the dual encoder on matched image/caption pairs.

    Returns the per-step loss history. Zero epochs leaves the weights
    untouched.
    """
    if cfg.batch_size < 2:
        raise ConfigError("contrastive batches need at least 2 pairs")
    if images.shape[0] != token_ids.shape[0]:
        raise ValidationError(
            f"{images.shape[0]} images but {token_ids.shape[0]} captions"
        )
    n = images.shape[0]
    opt = torch.optim.AdamW(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    plan = [_epoch_batches(n, cfg.batch_size, gen, group_ids) for _ in range(cfg.epochs)]
    total_steps = max(1, sum(len(b) for b in plan))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    history: list[float] = []
    encoder.train()
    for batches in plan:
        for idx in batches:
            if idx.numel() < 2:
                continue
            batch_images = augment_images(
                images[idx], gen, cfg.shift_max, cfg.noise_std, cfg.background_fill
            )
            loss = encoder.contrastive_loss(batch_images, token_ids[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"contrastive loss became {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            with torch.no_grad():
                encoder.logit_scale.clamp_(max=MAX_LOGIT_SCALE)
            history.append(loss.item())
    encoder.eval()
    return history


def class_name_embeddings(
    encoder: DualEncoder,
    tokenizer: WordTokenizer,
    class_names: Sequence[str],
    template: str = "a photo of a {}",
) -> dict[int, np.ndarray]:
    """Unit-norm text embeddings of templated class names, keyed by label id."""
    encoder.eval()
    out: dict[int, np.ndarray] = {}
    with torch.no_grad():
        rows = [torch.tensor(tokenizer.encode(template.format(name))) for name in class_names]
        length = max(r.numel() for r in rows)
        batch = torch.full((len(rows), length), tokenizer.pad_id, dtype=torch.long)
        for i, r in enumerate(rows):
            batch[i, : r.numel()] = r
        emb = F.normalize(encoder.encode_text(batch), dim=-1)
    for i in range(len(class_names)):
        out[i] = emb[i].double().numpy()
    return out


def save_checkpoint(path: str | Path, encoder: DualEncoder, tokenizer: WordTokenizer,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": 1,
        "image_cfg": asdict(encoder.image.cfg),
        "text_cfg": asdict(encoder.text.cfg),
        "vocab": tokenizer.words,
        "state_dict": encoder.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[DualEncoder, WordTokenizer, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != 1:
        raise ValidationError(f"unsupported checkpoint version {payload.get('format_version')}")
    image_cfg = ImageEncoderConfig(**{**payload["image_cfg"],
                                      "injection_blocks": tuple(payload["image_cfg"]["injection_blocks"])})
    text_cfg = TextEncoderConfig(**payload["text_cfg"])
    encoder = DualEncoder(image_cfg, text_cfg)
    encoder.load_state_dict(payload["state_dict"])
    tokenizer = WordTokenizer(payload["vocab"])
    if tokenizer.words != payload["vocab"]:
        raise ValidationError("checkpoint vocabulary is not in canonical order")
    return encoder, tokenizer, payload.get("extra", {})
