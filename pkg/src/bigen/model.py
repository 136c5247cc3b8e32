"""Unified multimodal transformer.

One trunk consumes a joint sequence of 64 image slots followed by 17 text
slots and serves both task directions; only the two output classifiers are
task specific. Modality-dependent attention masks select the direction:

  captioning       image slots attend image slots; text slots are causal, so
                   the prediction for text position l (read from slot l-1,
                   the standard next-token alignment of `text_logits`) sees
                   all image slots and text inputs strictly before l.
  image_synthesis  image slots attend everything non-pad; text slots attend
                   text slots (bidirectional).

Padding positions are never attended as keys; a query with no allowed key
falls back to itself to keep softmax finite.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import viscodec

CAPTIONING = "captioning"
IMAGE_SYNTHESIS = "image_synthesis"
MODES = (CAPTIONING, IMAGE_SYNTHESIS)


@dataclass(frozen=True)
class ModelConfig:
    text_vocab: int
    image_vocab: int
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    ff: int = 512
    text_len: int = 17
    grid_len: int = viscodec.M
    feature_dim: int = viscodec.D
    # which heads exist; the unified model has both, task-specific clones one
    with_text_head: bool = True
    with_image_head: bool = True

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class JointSequence:
    """One batch of joint inputs. image slots always precede text slots."""
    image_features: torch.Tensor    # B x M x D (dense or discrete rows)
    boxes: torch.Tensor             # B x M x 4
    text_ids: torch.Tensor          # B x L
    text_mask: torch.Tensor        # B x L bool, True where a real token sits
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")


class _Attention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        assert d % heads == 0
        self.heads = heads
        self.dk = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, bias):
        # x: B x S x d, bias: B x 1 x S x S additive (-inf on disallowed keys)
        B, S, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, S, self.heads, self.dk).transpose(1, 2)
        k = k.view(B, S, self.heads, self.dk).transpose(1, 2)
        v = v.view(B, S, self.heads, self.dk).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dk) + bias
        h = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, S, d)
        return self.out(h)


class _Block(nn.Module):
    def __init__(self, d, heads, ff):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = _Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Linear(ff, d))

    def forward(self, x, bias):
        x = x + self.attn(self.norm1(x), bias)
        x = x + self.mlp(self.norm2(x))
        return x


class UnifiedModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        # input side (shared by both directions)
        self.text_embedding = nn.Embedding(config.text_vocab, d)
        self.text_position = nn.Embedding(config.text_len, d)
        self.image_projection = nn.Linear(config.feature_dim, d)
        self.image_position = nn.Linear(4, d)
        self.modality = nn.Embedding(2, d)  # 0 = image, 1 = text
        self.mask_feature = nn.Parameter(torch.zeros(config.feature_dim))
        self.input_norm = nn.LayerNorm(d)
        # shared trunk
        self.trunk = nn.ModuleList(
            [_Block(d, config.heads, config.ff) for _ in range(config.layers)])
        self.final_norm = nn.LayerNorm(d)
        # task-specific classifiers
        self.text_head = nn.Linear(d, config.text_vocab) if config.with_text_head else None
        self.image_head = nn.Linear(d, config.image_vocab) if config.with_image_head else None

    # --- attention masking -------------------------------------------------
    def _attention_bias(self, text_mask: torch.Tensor, mode: str,
                        dtype: torch.dtype) -> torch.Tensor:
        Mg, L = self.config.grid_len, self.config.text_len
        B = text_mask.shape[0]
        S = Mg + L
        dev = text_mask.device
        allowed = torch.zeros(B, S, S, dtype=torch.bool, device=dev)
        txt = text_mask  # B x L
        if mode == CAPTIONING:
            allowed[:, :Mg, :Mg] = True                      # image -> image
            allowed[:, Mg:, :Mg] = True                      # text -> image
            tri = torch.tril(torch.ones(L, L, dtype=torch.bool, device=dev))
            allowed[:, Mg:, Mg:] = tri[None] & txt[:, None, :]  # text -> causal over text
        else:
            allowed[:, :Mg, :Mg] = True                      # image -> image
            allowed[:, :Mg, Mg:] = txt[:, None, :]           # image -> non-pad text
            allowed[:, Mg:, Mg:] = txt[:, None, :]           # text -> non-pad text
        # a query with no key attends itself (pad slots, first caption slot is
        # covered by image keys already)
        orphan = ~allowed.any(dim=-1)
        eye = torch.eye(S, dtype=torch.bool, device=dev)[None]
        allowed = allowed | (orphan[:, :, None] & eye)
        bias = torch.zeros(B, 1, S, S, dtype=dtype, device=dev)
        bias.masked_fill_(~allowed[:, None], float("-inf"))
        return bias

    # --- forward -----------------------------------------------------------
    def forward(self, seq: JointSequence) -> torch.Tensor:
        cfg = self.config
        B, Mg, Dd = seq.image_features.shape
        if (Mg, Dd) != (cfg.grid_len, cfg.feature_dim):
            raise ValueError(f"image features must be {cfg.grid_len}x{cfg.feature_dim}")
        if seq.text_ids.shape != (B, cfg.text_len):
            raise ValueError(f"text ids must be Bx{cfg.text_len}")
        dev = seq.text_ids.device
        dtype = self.image_projection.weight.dtype
        img = (self.image_projection(seq.image_features.to(dtype))
               + self.image_position(seq.boxes.to(dtype))
               + self.modality.weight[0])
        pos = torch.arange(cfg.text_len, device=dev)
        txt = (self.text_embedding(seq.text_ids)
               + self.text_position(pos)[None]
               + self.modality.weight[1])
        x = self.input_norm(torch.cat([img, txt], dim=1))
        bias = self._attention_bias(seq.text_mask, seq.mode, x.dtype)
        for block in self.trunk:
            x = block(x, bias)
        return self.final_norm(x)

    def text_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        """Next-token scores: row l scores the token at text slot l+1."""
        if self.text_head is None:
            raise RuntimeError("model built without a text head")
        return self.text_head(hidden[:, self.config.grid_len:, :])

    def image_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.image_head is None:
            raise RuntimeError("model built without an image head")
        return self.image_head(hidden[:, :self.config.grid_len, :])


def parameter_census(model: UnifiedModel) -> dict[str, int]:
    """Exact parameter counts per component group."""
    def count(mod) -> int:
        return sum(p.numel() for p in mod.parameters()) if mod is not None else 0

    trunk = sum(count(b) for b in model.trunk) + count(model.final_norm)
    embeddings = (count(model.text_embedding) + count(model.text_position)
                  + count(model.image_projection) + count(model.image_position)
                  + count(model.modality) + count(model.input_norm)
                  + model.mask_feature.numel())
    census = {
        "trunk": trunk,
        "embeddings": embeddings,
        "text_head": count(model.text_head),
        "image_head": count(model.image_head),
    }
    census["total"] = sum(census.values())
    assert census["total"] == sum(p.numel() for p in model.parameters())
    return census


def separate_models_param_count(config: ModelConfig) -> int:
    """Parameters of two task-specific clones that share nothing."""
    text_only = UnifiedModel(ModelConfig(**{**asdict(config),
                                            "with_image_head": False,
                                            "with_text_head": True}))
    image_only = UnifiedModel(ModelConfig(**{**asdict(config),
                                             "with_text_head": False,
                                             "with_image_head": True}))
    return (parameter_census(text_only)["total"]
            + parameter_census(image_only)["total"])
