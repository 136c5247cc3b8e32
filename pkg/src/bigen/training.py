"""Two-stage optimization.

Stage 1 (token level): teacher-forced cross-entropy in both directions, with
label smoothing, alternating caption and grid batches. Caption batches consume
dense grid features; grid batches consume discrete features as inputs and
discrete token ids as targets (the two-level routing rule; the dense_only /
discrete_only presets override it).

Stage 2 (sequence level): the text direction minimizes a self-critical policy
gradient whose reward is the consensus caption score and whose baseline is the
greedy decode; the image direction interleaves grid cross-entropy batches with
a consistency loss, -max(cos(I(X_hat), T(Y)), 0), differentiated through a
straight-through Gumbel-Softmax over predicted token distributions against the
frozen dual-encoder scorer.

AdamW with warmup+cosine schedule in stage 1 and a fixed rate in stage 2;
gradients are clipped by global norm. Every step appends a JSON line to the
training log.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics, sampling, viscodec
from .model import CAPTIONING, IMAGE_SYNTHESIS, JointSequence, UnifiedModel
from .seeding import derive_seed


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = batch_ids or []


@dataclass
class TrainConfig:
    # stage-1 schedule (reference settings: warmup over the first 5% of steps
    # up to 5e-5, cosine decay to 0); stage 2 runs at a small fixed rate
    lr_base: float = 5e-5
    warmup_frac: float = 0.05
    stage2_lr: float = 1e-6
    stage2_lr_image: float | None = None   # image-direction rate; None = stage2_lr
    scst_temperature: float = 1.0
    weight_decay: float = 1e-2
    label_smoothing: float = 0.2
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    batch_stage1: int = 32
    batch_stage2: int = 32
    steps_stage1: int = 2000
    steps_stage2: int = 400
    alternation: tuple = (1, 1)     # text : image batches in stage 1
    clip_mix: tuple = (1, 1)        # grid-CE : consistency-loss batches in stage-2 image
    gumbel_tau: float = 1.0
    seed: int = 0
    # feature routing per direction
    caption_features: str = "dense"
    synthesis_features: str = "discrete"
    # stage-2 toggles
    stage2_text: bool = True
    stage2_image: bool = True
    use_clip_loss: bool = True

    def validate(self) -> None:
        if self.lr_base <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.stage2_lr_image is not None and self.stage2_lr_image <= 0:
            raise ValueError("learning rates must be positive")
        if self.scst_temperature <= 0:
            raise ValueError("scst sampling temperature must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must lie in [0, 1)")
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel temperature must be positive")
        if self.grad_clip <= 0 or self.weight_decay < 0:
            raise ValueError("bad regularization settings")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")
        for pair in (self.alternation, self.clip_mix):
            if len(pair) != 2 or min(pair) < 0 or max(pair) == 0:
                raise ValueError("ratios need two non-negative entries, one positive")
        if self.caption_features not in ("dense", "discrete"):
            raise ValueError("caption_features must be dense or discrete")
        if self.synthesis_features not in ("dense", "discrete"):
            raise ValueError("synthesis_features must be dense or discrete")


def lr_at(step: int, total: int, base: float, warmup_frac: float) -> float:
    """0 at step 0, `base` at the end of warmup, cosine to ~0 at `total`."""
    warmup = max(1, math.ceil(warmup_frac * total))
    if step < warmup:
        return base * step / warmup
    span = max(1, total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def smoothed_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                           smoothing: float) -> torch.Tensor:
    """Per-element CE against (1-eps)*one_hot + eps/V targets."""
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets[..., None]).squeeze(-1)
    if smoothing == 0.0:
        return nll
    uniform = -logp.mean(dim=-1)
    return (1.0 - smoothing) * nll + smoothing * uniform


def caption_ce_loss(model: UnifiedModel, features, boxes, captions, caption_mask,
                    smoothing: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean smoothed CE of next-token prediction over non-pad positions.

    Returns (smoothed loss, raw unsmoothed CE) as scalars.
    """
    hidden = model(JointSequence(features, boxes, captions, caption_mask, CAPTIONING))
    logits = model.text_logits(hidden)[:, :-1, :]
    targets = captions[:, 1:]
    valid = caption_mask[:, 1:]
    if not bool(valid.any()):
        raise ValueError("caption batch has no target tokens")
    ce = smoothed_cross_entropy(logits, targets, smoothing)
    raw = smoothed_cross_entropy(logits, targets, 0.0)
    return ce[valid].mean(), raw[valid].mean().detach()


def sample_mask_plans(rng: np.random.Generator, batch: int,
                      grid_len: int = viscodec.M) -> torch.Tensor:
    """Per-example masked-slot sets: M' ~ U{1..M}, positions uniform."""
    plans = np.zeros((batch, grid_len), dtype=bool)
    for b in range(batch):
        m_prime = int(rng.integers(1, grid_len + 1))
        plans[b, rng.choice(grid_len, size=m_prime, replace=False)] = True
    return torch.from_numpy(plans)


def grid_ce_loss(model: UnifiedModel, features, boxes, captions, caption_mask,
                 token_targets, plans: torch.Tensor,
                 smoothing: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean smoothed CE over masked grid slots only.

    `features` carries the unmasked inputs; masked slots are replaced by the
    learned mask feature. Unmasked slots contribute nothing to the loss.
    """
    if not bool(plans.any(dim=-1).all()):
        raise ValueError("every mask plan needs at least one masked slot")
    feats = torch.where(plans[..., None], model.mask_feature[None, None, :],
                        features.to(model.mask_feature.dtype))
    hidden = model(JointSequence(feats, boxes, captions, caption_mask, IMAGE_SYNTHESIS))
    logits = model.image_logits(hidden)
    ce = smoothed_cross_entropy(logits, token_targets, smoothing)
    raw = smoothed_cross_entropy(logits, token_targets, 0.0)
    return ce[plans].mean(), raw[plans].mean().detach()


def sequence_log_prob(model: UnifiedModel, features, boxes, ids, pad: int = 0):
    """Sum over generated positions of log p(token_l | tokens_<l, image)."""
    mask = ids != pad
    hidden = model(JointSequence(features, boxes, ids, mask, CAPTIONING))
    logp = F.log_softmax(model.text_logits(hidden)[:, :-1, :], dim=-1)
    tok_logp = logp.gather(-1, ids[:, 1:, None]).squeeze(-1)
    return (tok_logp * mask[:, 1:]).sum(dim=-1)


def scst_loss(model: UnifiedModel, features, boxes,
              reward_fn: Callable[[list[list[int]]], np.ndarray],
              generator: torch.Generator,
              bos: int = 1, eos: int = 2, pad: int = 0,
              temperature: float = 1.0):
    """Self-critical loss: -(r(sample) - r(greedy)) * log p(sample).

    reward_fn maps a list of decoded id-lists (without BOS/EOS) to rewards.
    Returns (loss, info dict with rewards and the sampled ids).
    """
    sampled = sampling.decode_caption(model, features, boxes, mode="sample",
                                      temperature=temperature, generator=generator,
                                      bos=bos, eos=eos, pad=pad)
    greedy = sampling.decode_caption(model, features, boxes, mode="greedy",
                                     bos=bos, eos=eos, pad=pad)

    def strip(ids_row):
        out = []
        for t in ids_row.tolist():
            if t == bos or t == pad:
                continue
            if t == eos:
                break
            out.append(t)
        return out

    r = np.asarray(reward_fn([strip(row) for row in sampled]), dtype=np.float64)
    b = np.asarray(reward_fn([strip(row) for row in greedy]), dtype=np.float64)
    advantage = torch.as_tensor(r - b, dtype=features.dtype, device=features.device)
    logp = sequence_log_prob(model, features, boxes, sampled, pad=pad)
    loss = -(advantage * logp).mean()
    info = {"reward": float(r.mean()), "baseline": float(b.mean()),
            "advantage": float(advantage.mean()), "sampled": sampled}
    return loss, info


def gumbel_noise(shape, generator: torch.Generator | None, dtype, device) -> torch.Tensor:
    # -log(E), E ~ Exp(1) is Gumbel(0, 1); avoids log(0) edge cases of the
    # double-log-of-uniform form
    e = torch.empty(shape, dtype=dtype, device=device).exponential_(generator=generator)
    return -torch.log(e.clamp(min=1e-30))


def clip_image_loss(model: UnifiedModel, scorer, centroids: torch.Tensor,
                    boxes, captions, caption_mask, tau: float,
                    generator: torch.Generator | None = None,
                    estimator: str = "straight_through",
                    plans: Optional[torch.Tensor] = None,
                    context_features: Optional[torch.Tensor] = None):
    """Consistency loss -max(cos(I(X_hat), T(Y)), 0) in [-1, 0].

    Predicts tokens for the masked grid (fully masked by default), relaxes the
    per-slot categorical with Gumbel-Softmax at temperature tau, and embeds
    the soft centroid mixture with the frozen scorer. `estimator` selects a
    straight-through hard forward or the purely soft relaxation.
    """
    if tau <= 0:
        raise ValueError("gumbel temperature must be positive")
    if estimator not in ("straight_through", "soft"):
        raise ValueError(f"unknown estimator {estimator!r}")
    B = captions.shape[0]
    Mg = model.config.grid_len
    dtype = model.mask_feature.dtype
    dev = captions.device
    cents = centroids.to(dtype=dtype, device=dev)
    if plans is None:
        plans = torch.ones(B, Mg, dtype=torch.bool, device=dev)
    if context_features is None:
        context_features = torch.zeros(B, Mg, model.config.feature_dim,
                                       dtype=dtype, device=dev)
    feats = torch.where(plans[..., None], model.mask_feature[None, None, :],
                        context_features.to(dtype))
    hidden = model(JointSequence(feats, boxes, captions, caption_mask, IMAGE_SYNTHESIS))
    logits = model.image_logits(hidden)
    g = gumbel_noise(logits.shape, generator, logits.dtype, dev)
    soft = ((logits + g) / tau).softmax(dim=-1)
    if estimator == "straight_through":
        hard = F.one_hot(soft.argmax(dim=-1), soft.shape[-1]).to(soft.dtype)
        tokens = hard - soft.detach() + soft
    else:
        tokens = soft
    img_emb = scorer.embed_image(tokens @ cents, boxes)
    txt_emb = scorer.embed_text(captions, caption_mask)
    cos = (img_emb * txt_emb).sum(dim=-1)
    loss = -cos.clamp(min=0.0).mean()
    return loss, {"cos": float(cos.mean().detach()), "soft_entropy": float(
        -(soft.detach() * soft.detach().clamp(min=1e-12).log()).sum(-1).mean())}


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    path: Optional[Path] = None

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _direction_pattern(ratio: tuple, directions: tuple) -> list[str]:
    pattern = []
    if "text" in directions:
        pattern += ["text"] * ratio[0]
    if "image" in directions:
        pattern += ["image"] * ratio[1]
    return pattern or list(directions)


def _features_for(split, kind: str) -> torch.Tensor:
    return split.dense if kind == "dense" else split.discrete


def _make_optimizer(model, cfg: TrainConfig, lr: float):
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=tuple(cfg.betas),
                             weight_decay=cfg.weight_decay)


def _clip_and_norm(model, threshold: float) -> float:
    torch.nn.utils.clip_grad_norm_(model.parameters(), threshold)
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _check_finite(loss, step, ids, log: TrainLog):
    if not torch.isfinite(loss):
        log.append({"event": "nan_loss", "step": step, "batch_ids": ids})
        raise TrainingDivergedError(f"non-finite loss at step {step}", batch_ids=ids)


def train_stage1(model: UnifiedModel, train_split, cfg: TrainConfig,
                 log: TrainLog | None = None,
                 directions: tuple = ("text", "image")) -> TrainLog:
    """Token-level training: alternating teacher-forced CE batches."""
    cfg.validate()
    log = log or TrainLog()
    opt = _make_optimizer(model, cfg, cfg.lr_base)
    data_rng = np.random.default_rng(derive_seed(cfg.seed, "stage1-data"))
    mask_rng = np.random.default_rng(derive_seed(cfg.seed, "masking"))
    pattern = _direction_pattern(cfg.alternation, directions)
    n = len(train_split)
    for step in range(cfg.steps_stage1):
        lr = lr_at(step, cfg.steps_stage1, cfg.lr_base, cfg.warmup_frac)
        for group in opt.param_groups:
            group["lr"] = lr
        direction = pattern[step % len(pattern)]
        sel = torch.as_tensor(data_rng.choice(n, size=min(cfg.batch_stage1, n),
                                              replace=False))
        ids = [train_split.ids[i] for i in sel.tolist()]
        if direction == "text":
            feats = _features_for(train_split, cfg.caption_features)[sel]
            loss, raw = caption_ce_loss(model, feats, train_split.boxes[sel],
                                        train_split.captions[sel],
                                        train_split.caption_mask[sel],
                                        smoothing=cfg.label_smoothing)
        else:
            plans = sample_mask_plans(mask_rng, len(sel))
            feats = _features_for(train_split, cfg.synthesis_features)[sel]
            loss, raw = grid_ce_loss(model, feats, train_split.boxes[sel],
                                     train_split.captions[sel],
                                     train_split.caption_mask[sel],
                                     train_split.tokens[sel], plans,
                                     smoothing=cfg.label_smoothing)
        _check_finite(loss, step, ids, log)
        opt.zero_grad()
        loss.backward()
        grad_norm = _clip_and_norm(model, cfg.grad_clip)
        opt.step()
        log.append({"step": step, "stage": 1, "direction": direction,
                    "features": cfg.caption_features if direction == "text"
                    else cfg.synthesis_features,
                    "loss": float(loss.detach()), "raw_ce": float(raw),
                    "lr": lr, "grad_norm": grad_norm})
    return log


def make_cider_reward(references: list, vocab) -> Callable:
    """Consensus-score reward over the split's references, by example index."""
    stats = metrics.CiderCorpusStats.from_references(references)

    def reward(decoded_ids: list[list[int]], indices: list[int]) -> np.ndarray:
        out = np.empty(len(decoded_ids))
        for i, (ids, idx) in enumerate(zip(decoded_ids, indices)):
            words = [vocab.id_to_token[t] for t in ids]
            out[i] = metrics.cider_d(words, references[idx], stats)
        return out

    return reward


def train_stage2(model: UnifiedModel, train_split, cfg: TrainConfig,
                 scorer=None, centroids: torch.Tensor | None = None,
                 vocab=None, log: TrainLog | None = None,
                 directions: tuple = ("text", "image")) -> TrainLog:
    """Sequence-level training from a stage-1 initialization."""
    cfg.validate()
    log = log or TrainLog()
    directions = tuple(d for d in directions
                       if (d == "text" and cfg.stage2_text)
                       or (d == "image" and cfg.stage2_image))
    if not directions:
        return log
    if "text" in directions and vocab is None:
        raise ValueError("stage-2 text training needs the text vocabulary")
    if "image" in directions and cfg.use_clip_loss and (scorer is None or centroids is None):
        raise ValueError("stage-2 image training needs the frozen scorer and centroids")
    if scorer is not None:
        scorer.eval()
        for p in scorer.parameters():
            p.requires_grad_(False)
    opt = _make_optimizer(model, cfg, cfg.stage2_lr)
    lr_image = cfg.stage2_lr if cfg.stage2_lr_image is None else cfg.stage2_lr_image
    data_rng = np.random.default_rng(derive_seed(cfg.seed, "stage2-data"))
    mask_rng = np.random.default_rng(derive_seed(cfg.seed, "stage2-masking"))
    sample_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "sampling"))
    gumbel_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "gumbel"))
    reward = make_cider_reward(train_split.references, vocab) if "text" in directions else None
    pattern = _direction_pattern((1, 1), directions)
    mix = _direction_pattern(cfg.clip_mix, ("text", "image"))  # text slot = grid CE
    n = len(train_split)
    image_step = 0
    for step in range(cfg.steps_stage2):
        direction = pattern[step % len(pattern)]
        lr = cfg.stage2_lr if direction == "text" else lr_image
        for group in opt.param_groups:
            group["lr"] = lr
        sel = torch.as_tensor(data_rng.choice(n, size=min(cfg.batch_stage2, n),
                                              replace=False))
        ids = [train_split.ids[i] for i in sel.tolist()]
        rec = {"step": step, "stage": 2, "direction": direction, "lr": lr}
        if direction == "text":
            feats = _features_for(train_split, cfg.caption_features)[sel]
            loss, info = scst_loss(
                model, feats, train_split.boxes[sel],
                reward_fn=lambda d: reward(d, sel.tolist()),
                generator=sample_gen, temperature=cfg.scst_temperature,
                bos=vocab.bos_id, eos=vocab.eos_id, pad=vocab.pad_id)
            rec.update({"loss": float(loss.detach()), "objective": "scst",
                        "reward": info["reward"], "baseline": info["baseline"],
                        "features": cfg.caption_features})
        else:
            feats = _features_for(train_split, cfg.synthesis_features)[sel]
            use_clip = cfg.use_clip_loss and mix[image_step % len(mix)] == "image"
            image_step += 1
            if use_clip:
                loss, info = clip_image_loss(
                    model, scorer, centroids, train_split.boxes[sel],
                    train_split.captions[sel], train_split.caption_mask[sel],
                    tau=cfg.gumbel_tau, generator=gumbel_gen)
                rec.update({"loss": float(loss.detach()), "objective": "clip",
                            "cos": info["cos"], "features": cfg.synthesis_features})
            else:
                plans = sample_mask_plans(mask_rng, len(sel))
                loss, raw = grid_ce_loss(model, feats, train_split.boxes[sel],
                                         train_split.captions[sel],
                                         train_split.caption_mask[sel],
                                         train_split.tokens[sel], plans,
                                         smoothing=cfg.label_smoothing)
                rec.update({"loss": float(loss.detach()), "objective": "grid_ce",
                            "raw_ce": float(raw), "features": cfg.synthesis_features})
        _check_finite(loss, step, ids, log)
        opt.zero_grad()
        loss.backward()
        rec["grad_norm"] = _clip_and_norm(model, cfg.grad_clip)
        opt.step()
        log.append(rec)
    return log
