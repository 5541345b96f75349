"""Decoupled vision and language prompt paths.

Vision side: per-detection prior rows are lifted by a small MLP, then a
decoder-attention stack lets each instance query the clustered global
layout patterns, producing one prompt vector per detection. Those prompts
are injected into the frozen image tower through low-rank cross-attention
adapters whose output layer starts at zero, so an untrained model
reproduces the plain backbone exactly.

Language side: a shared bank of learnable context vectors is prepended to
a fixed per-action word template; encoding each sequence yields one
unit-norm prototype per action. A contrastive consistency loss ties the
learned prototypes to the prototypes of the bare human-written templates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import MultiheadAttention, TextEncoder, WordTokenizer
from .errors import ConfigError, ValidationError
from .geometry import SPATIAL_FEATURE_DIM

ACTION_TEMPLATE = "a photo of a person {} an object"


def masked_attention(
    attn: MultiheadAttention,
    query: torch.Tensor,
    keys: torch.Tensor,
    key_padding_mask: Optional[torch.Tensor],
) -> torch.Tensor:
    """Attention that yields zeros for batch rows whose keys are all padding."""
    if key_padding_mask is None:
        return attn(query, keys, keys)
    has_key = (~key_padding_mask).any(dim=1)
    if not bool(has_key.any()):
        return torch.zeros(
            query.shape[0], query.shape[1], attn.dim, dtype=query.dtype, device=query.device
        )
    # unmask keyless rows to keep softmax finite, then zero their output
    safe = key_padding_mask & has_key[:, None]
    out = attn(query, keys, keys, key_padding_mask=safe)
    return out * has_key[:, None, None].to(out.dtype)


@dataclass(frozen=True)
class VisionPromptConfig:
    prior_dim: int  # width of a raw instance-prior row (4 + 1 + embedding dim)
    prompt_dim: int = 64
    heads: int = 4
    depth: int = 2
    mlp_ratio: float = 2.0
    pattern_dim: int = SPATIAL_FEATURE_DIM

    def __post_init__(self):
        if self.prompt_dim % self.heads != 0:
            raise ConfigError(f"prompt width {self.prompt_dim} not divisible by {self.heads} heads")
        if self.depth < 1:
            raise ConfigError("need at least one decoder layer")


class PatternDecoderLayer(nn.Module):
    """Pre-norm decoder layer: instance self-attention, pattern cross-attention, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        x_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + masked_attention(self.self_attn, h, h, x_padding_mask)
        x = x + self.cross_attn(self.norm2(x), memory, memory)
        x = x + self.mlp(self.norm3(x))
        return x


class VisionPromptBuilder(nn.Module):
    """Turn instance-prior rows and global layout patterns into vision prompts.

    Instances act as queries, projected pattern centers as keys and values.
    Output is one prompt vector per retained detection.
    """

    def __init__(self, cfg: VisionPromptConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.prompt_dim
        self.prior_mlp = nn.Sequential(
            nn.Linear(cfg.prior_dim, d), nn.GELU(), nn.Linear(d, d)
        )
        self.pattern_proj = nn.Linear(cfg.pattern_dim, d)
        self.layers = nn.ModuleList(
            PatternDecoderLayer(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)

    def forward(
        self,
        prior: torch.Tensor,
        patterns: torch.Tensor,
        prior_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """prior (B, N, prior_dim) or (N, prior_dim); patterns (K, pattern_dim).

        Returns prompts with the same leading shape and width prompt_dim.
        Padded instance slots (mask True) give meaningless rows the caller
        must keep masked downstream.
        """
        squeeze = prior.ndim == 2
        if squeeze:
            prior = prior.unsqueeze(0)
            if prior_padding_mask is not None:
                prior_padding_mask = prior_padding_mask.unsqueeze(0)
        if prior.shape[-1] != self.cfg.prior_dim:
            raise ValidationError(
                f"prior rows have width {prior.shape[-1]}, expected {self.cfg.prior_dim}"
            )
        if patterns.ndim != 2 or patterns.shape[-1] != self.cfg.pattern_dim:
            raise ValidationError(
                f"patterns must be (K, {self.cfg.pattern_dim}), got {tuple(patterns.shape)}"
            )
        b, n, _ = prior.shape
        if n == 0:
            out = prior.new_zeros((b, 0, self.cfg.prompt_dim))
            return out.squeeze(0) if squeeze else out
        x = self.prior_mlp(prior)
        memory = self.pattern_proj(patterns).unsqueeze(0).expand(b, -1, -1)
        for layer in self.layers:
            x = layer(x, memory, x_padding_mask=prior_padding_mask)
        x = self.norm(x)
        return x.squeeze(0) if squeeze else x


class PromptInjector(nn.Module):
    """Low-rank cross-attention adapter adding prompt context to a feature map.

    Tokens are projected down to the prompt width, attend over the prompt
    vectors, and the result is projected back up and added residually. The
    up projection is zero-initialized: at initialization the adapter is an
    exact identity.
    """

    def __init__(self, feature_dim: int, prompt_dim: int, heads: int = 4):
        super().__init__()
        self.down = nn.Linear(feature_dim, prompt_dim)
        self.attn = MultiheadAttention(prompt_dim, heads)
        self.up = nn.Linear(prompt_dim, feature_dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(
        self,
        tokens: torch.Tensor,
        prompts: torch.Tensor,
        prompt_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """tokens (B, N, d) or (N, d); prompts (B, P, p) or (P, p)."""
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
            prompts = prompts.unsqueeze(0)
            if prompt_padding_mask is not None:
                prompt_padding_mask = prompt_padding_mask.unsqueeze(0)
        if prompts.shape[-1] != self.down.out_features:
            raise ValidationError(
                f"prompt width {prompts.shape[-1]} does not match adapter width "
                f"{self.down.out_features}"
            )
        if prompts.shape[1] == 0:
            return tokens.squeeze(0) if squeeze else tokens
        q = self.down(tokens)
        ctx = masked_attention(self.attn, q, prompts, prompt_padding_mask)
        out = tokens + self.up(ctx)
        return out.squeeze(0) if squeeze else out


class LanguagePromptLearner(nn.Module):
    """Shared learnable context vectors plus fixed per-action templates.

    `build` encodes [start, context, template words, end] per action and
    returns unit-norm prototype rows; `human_prototypes` does the same
    without the learned context and caches the result (the text tower is
    frozen, so it never changes).
    """

    def __init__(
        self,
        tokenizer: WordTokenizer,
        verbs: list[str],
        context_tokens: int = 16,
        width: int = 128,
        context_length: int = 32,
        init_std: float = 0.02,
    ):
        super().__init__()
        if context_tokens < 0:
            raise ConfigError("context size must be >= 0")
        self.tokenizer = tokenizer
        self.verbs = list(verbs)
        self.context_tokens = context_tokens
        template_ids = [tokenizer.encode_words(ACTION_TEMPLATE.format(v)) for v in verbs]
        lengths = {len(t) for t in template_ids}
        self.template_len = max(lengths)
        for verb, ids in zip(verbs, template_ids):
            if tokenizer.unk_id in ids:
                raise ConfigError(f"verb template for '{verb}' contains out-of-vocabulary words")
        total = 2 + context_tokens + self.template_len
        if total > context_length:
            raise ValidationError(
                f"prompted sequence length {total} exceeds context length {context_length}"
            )
        padded = torch.full((len(verbs), self.template_len), tokenizer.pad_id, dtype=torch.long)
        for i, ids in enumerate(template_ids):
            padded[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        self.register_buffer("template_ids", padded)
        self.register_buffer(
            "template_lengths", torch.tensor([len(t) for t in template_ids], dtype=torch.long)
        )
        self.ctx = nn.Parameter(torch.empty(context_tokens, width).normal_(std=init_std))
        self.register_buffer("_human_cache", torch.empty(0), persistent=False)

    @property
    def num_actions(self) -> int:
        return len(self.verbs)

    def _encode_sequences(self, text_encoder: TextEncoder, ctx: Optional[torch.Tensor]) -> torch.Tensor:
        a = self.num_actions
        s = 0 if ctx is None else ctx.shape[0]
        device = self.template_ids.device
        start = text_encoder.embed_tokens(
            torch.full((a, 1), self.tokenizer.start_id, dtype=torch.long, device=device)
        )
        words = text_encoder.embed_tokens(self.template_ids)
        end = text_encoder.embed_tokens(
            torch.full((a, 1), self.tokenizer.end_id, dtype=torch.long, device=device)
        )
        parts = [start]
        if s > 0:
            parts.append(ctx.unsqueeze(0).expand(a, -1, -1))
        parts.extend([words, end])
        seq = torch.cat(parts, dim=1)
        # move each row's end embedding to just after its real words
        lengths = self.template_lengths
        eos_pos = 1 + s + lengths
        if int(lengths.min()) != int(lengths.max()):
            seq = seq.clone()
            for i in range(a):
                li = int(lengths[i])
                seq[i, 1 + s + li] = end[i, 0]
            pad_mask = torch.arange(seq.shape[1], device=device)[None, :] > eos_pos[:, None]
        else:
            pad_mask = None
        feats = text_encoder.forward_embedded(seq, eos_pos, key_padding_mask=pad_mask)
        return F.normalize(feats, dim=-1)

    def build(self, text_encoder: TextEncoder) -> torch.Tensor:
        """Prototype matrix (A, d) with unit-norm rows; differentiable in ctx."""
        return self._encode_sequences(text_encoder, self.ctx if self.context_tokens > 0 else None)

    def human_prototypes(self, text_encoder: TextEncoder) -> torch.Tensor:
        """Prototypes of the bare templates, computed once and cached."""
        if self._human_cache.numel() == 0:
            with torch.no_grad():
                self._human_cache = self._encode_sequences(text_encoder, None)
        return self._human_cache


def consistency_loss(
    learned: torch.Tensor,
    human: torch.Tensor,
    class_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Contrastive pull of each learned prototype toward its template prototype.

    Rows must be unit-norm so the pairwise dot products are cosines. With a
    boolean `class_mask`, only the selected classes participate (both as
    anchors and as negatives).
    """
    if learned.shape != human.shape:
        raise ValidationError(
            f"prototype shapes differ: {tuple(learned.shape)} vs {tuple(human.shape)}"
        )
    if class_mask is not None:
        learned = learned[class_mask]
        human = human[class_mask]
    a = learned.shape[0]
    if a == 0:
        return learned.new_zeros(())
    logits = learned @ human.t()
    targets = torch.arange(a, device=learned.device)
    return F.cross_entropy(logits, targets, reduction="sum")
