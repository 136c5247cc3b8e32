"""Inference: autoregressive caption decoding and mask-predict-k image sampling.

Caption decoding is standard left-to-right (greedy or temperature sampling)
bounded by the 17-token budget. Image token grids are sampled
non-autoregressively: start fully masked, predict every masked slot each
iteration, finalize the most confident slots on a ceiling schedule, re-mask
the rest; exactly k model forward passes produce all 64 tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import viscodec
from .model import CAPTIONING, IMAGE_SYNTHESIS, JointSequence, UnifiedModel


@dataclass(frozen=True)
class MaskPredictSchedule:
    k: int
    grid_len: int = viscodec.M

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("mask-predict needs k >= 1")
        if self.k > self.grid_len:
            raise ValueError("k cannot exceed the number of grid slots")

    @property
    def keep_counts(self) -> tuple[int, ...]:
        return tuple(math.ceil(self.grid_len * (i + 1) / self.k) for i in range(self.k))


def decode_caption(model: UnifiedModel, features: torch.Tensor, boxes: torch.Tensor,
                   mode: str = "greedy", temperature: float = 1.0,
                   generator: torch.Generator | None = None,
                   bos: int = 1, eos: int = 2, pad: int = 0) -> torch.Tensor:
    """Decode captions for a batch of images; returns B x L token ids.

    Output starts at BOS and stops at EOS or the length budget; greedy mode is
    deterministic.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    L = model.config.text_len
    B = features.shape[0]
    dev = features.device
    ids = torch.full((B, L), pad, dtype=torch.long, device=dev)
    ids[:, 0] = bos
    alive = torch.ones(B, dtype=torch.bool, device=dev)
    with torch.no_grad():
        for l in range(1, L):
            mask = (torch.arange(L, device=dev) < l)[None].expand(B, L)
            hidden = model(JointSequence(features, boxes, ids, mask, CAPTIONING))
            logits = model.text_logits(hidden)[:, l - 1, :]
            logits[:, pad] = float("-inf")
            logits[:, bos] = float("-inf")
            if mode == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                if temperature <= 0:
                    raise ValueError("sampling temperature must be positive")
                probs = (logits / temperature).softmax(dim=-1)
                nxt = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            if l == L - 1:
                nxt = torch.full_like(nxt, eos)  # budget exhausted
            ids[alive, l] = nxt[alive]
            alive = alive & (nxt != eos)
            if not alive.any():
                break
    return ids


@dataclass
class MaskPredictResult:
    tokens: torch.Tensor        # B x M int64
    forward_passes: int
    iterations: list = field(default_factory=list)


def mask_predict_k(model: UnifiedModel, captions: torch.Tensor,
                   caption_mask: torch.Tensor, schedule: MaskPredictSchedule,
                   centroids: torch.Tensor, temperature0: float = 1.0,
                   generator: torch.Generator | None = None) -> MaskPredictResult:
    """Sample a visual token grid for each caption in exactly k forward passes.

    Every iteration predicts all still-masked slots; iteration 0 may sample
    with a temperature, later iterations take the argmax. Confidence is the
    predicted token's probability; the top keep_counts[i] slots overall stay
    finalized (already-finalized slots never change).
    """
    Mg = model.config.grid_len
    B = captions.shape[0]
    dev = captions.device
    cents = centroids.to(dtype=model.mask_feature.dtype, device=dev)
    boxes = torch.as_tensor(viscodec.grid_positions(),
                            dtype=cents.dtype, device=dev)[None].expand(B, -1, -1)
    tokens = torch.zeros(B, Mg, dtype=torch.long, device=dev)
    finalized = torch.zeros(B, Mg, dtype=torch.bool, device=dev)
    confidence = torch.zeros(B, Mg, dtype=torch.float64, device=dev)
    result = MaskPredictResult(tokens=tokens, forward_passes=0)
    with torch.no_grad():
        for i, keep in enumerate(schedule.keep_counts):
            feats = torch.where(finalized[..., None], cents[tokens],
                                model.mask_feature.detach()[None, None, :])
            hidden = model(JointSequence(feats, boxes, captions, caption_mask,
                                         IMAGE_SYNTHESIS))
            result.forward_passes += 1
            logits = model.image_logits(hidden)
            probs = logits.softmax(dim=-1)
            if i == 0 and temperature0 > 0:
                flat = (logits / temperature0).softmax(dim=-1).reshape(B * Mg, -1)
                chosen = torch.multinomial(flat, 1, generator=generator).reshape(B, Mg)
            else:
                chosen = probs.argmax(dim=-1)
            chosen_conf = probs.gather(-1, chosen[..., None]).squeeze(-1).double()
            tokens = torch.where(finalized, tokens, chosen)
            confidence = torch.where(finalized,
                                     torch.full_like(confidence, float("inf")),
                                     chosen_conf)
            top = confidence.topk(keep, dim=-1).indices
            new_finalized = torch.zeros_like(finalized)
            new_finalized.scatter_(1, top, True)
            fresh = new_finalized & ~finalized
            min_fresh = chosen_conf.masked_fill(~fresh, float("inf")).min(dim=1).values
            max_remasked = chosen_conf.masked_fill(
                new_finalized, float("-inf")).max(dim=1).values
            result.iterations.append({
                "iteration": i, "keep": keep,
                # per example: weakest newly finalized slot still beats every
                # re-masked slot (selection is top-k overall)
                "min_margin": float((min_fresh - max_remasked).min())
                    if keep < Mg else float("inf"),
                "confidences": chosen_conf.cpu().numpy(),
                "finalized": new_finalized.cpu().numpy(),
            })
            finalized = new_finalized
    assert bool(finalized.all()), "mask-predict left unfinalized slots"
    result.tokens = tokens
    return result


def generate_image(model: UnifiedModel, caption_words: list[str], text_vocab,
                   visual_vocab: viscodec.VisualVocabulary,
                   schedule: MaskPredictSchedule, seed: int = 0,
                   temperature0: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Caption words -> (raster, token grid); deterministic given the seed."""
    ids = torch.tensor([text_vocab.encode(caption_words)], dtype=torch.long)
    mask = ids != text_vocab.pad_id
    gen = torch.Generator().manual_seed(seed)
    cents = torch.as_tensor(visual_vocab.centroids)
    res = mask_predict_k(model, ids, mask, schedule, cents,
                         temperature0=temperature0, generator=gen)
    tokens = res.tokens[0].cpu().numpy()
    return viscodec.render_tokens(tokens, visual_vocab), tokens
