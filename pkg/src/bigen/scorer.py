"""Contrastive dual-encoder used for scoring image-text consistency.

Trained locally on the synthetic corpus with a symmetric InfoNCE loss over
in-batch negatives, then frozen. The image side consumes grid features, either
dense rows or a soft mixture of visual-vocabulary centroids, so losses can
differentiate through predicted token distributions. Both encoders emit
unit-norm embeddings; similarity is their cosine.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import viscodec


class ScorerTrainingError(RuntimeError):
    """Contrastive training did not reach the retrieval threshold."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ScorerConfig:
    text_vocab: int
    feature_dim: int = viscodec.D
    grid_len: int = viscodec.M
    text_len: int = 17
    hidden: int = 128
    content_dim: int = 48
    embed_dim: int = 64

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class ScorerModel(nn.Module):
    def __init__(self, config: ScorerConfig):
        super().__init__()
        self.config = config
        h = config.hidden
        c = config.content_dim
        # patch content is encoded without position so recognition transfers
        # across cells; position joins afterwards
        self.patch_in = nn.Linear(config.feature_dim, h)
        self.patch_code = nn.Linear(h, c)
        self.slot_in = nn.Linear(c + 4, h)
        # second stage sees slot + global context so cross-object structure
        # (spatial relations, object counts) is representable
        self.image_mid = nn.Linear(2 * h, h)
        # mean+max pooling: object patches must stand out against the many
        # identical background patches, which swamp a plain mean
        self.image_out = nn.Linear(2 * h, config.embed_dim)
        self.text_embedding = nn.Embedding(config.text_vocab, h)
        self.text_position = nn.Embedding(config.text_len, h)
        self.text_mid = nn.Linear(h, h)
        self.text_out = nn.Linear(h, config.embed_dim)
        # contrastive logit scale starts at 1 so the initial loss sits at ln(B)
        self.log_temperature = nn.Parameter(torch.zeros(()))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def embed_image(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """features: B x M x D grid rows -> B x e unit-norm embeddings."""
        what = F.gelu(self.patch_code(F.gelu(self.patch_in(features))))
        x = F.gelu(self.slot_in(torch.cat([what, boxes.to(features.dtype)], dim=-1)))
        ctx = x.mean(dim=1, keepdim=True).expand_as(x)
        x = F.gelu(self.image_mid(torch.cat([x, ctx], dim=-1)))
        pooled = torch.cat([x.mean(dim=1), x.max(dim=1).values], dim=-1)
        return F.normalize(self.image_out(pooled), dim=-1)

    def embed_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """ids: B x L tokens, mask True on real tokens -> B x e unit-norm."""
        pos = torch.arange(self.config.text_len, device=ids.device)
        x = self.text_embedding(ids) + self.text_position(pos)[None]
        x = F.gelu(self.text_mid(F.gelu(x)))
        w = mask.to(x.dtype)[..., None]
        pooled = (x * w).sum(dim=1) / w.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.text_out(pooled), dim=-1)


def similarity(scorer: ScorerModel, features: torch.Tensor, boxes: torch.Tensor,
               ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between image and caption embeddings, in [-1, 1]."""
    img = scorer.embed_image(features, boxes)
    txt = scorer.embed_text(ids, mask)
    return (img * txt).sum(dim=-1)


def soft_image_embed(scorer: ScorerModel, soft_tokens: torch.Tensor,
                     centroids: torch.Tensor, boxes: torch.Tensor,
                     atol: float = 1e-6) -> torch.Tensor:
    """Embed a soft token grid (rows on the K-simplex) differentiably.

    Each slot's feature is the convex combination of vocabulary centroids; at
    exact one-hot rows this equals the hard discrete-feature embedding.
    """
    if soft_tokens.dim() == 2:
        soft_tokens = soft_tokens[None]
        squeeze = True
    else:
        squeeze = False
    sums = soft_tokens.sum(dim=-1)
    if (sums - 1.0).abs().max() > atol or soft_tokens.min() < -atol:
        raise ValueError("soft token rows must lie on the probability simplex")
    feats = soft_tokens @ centroids.to(soft_tokens.dtype)
    if boxes.dim() == 2:
        boxes = boxes[None].expand(feats.shape[0], -1, -1)
    emb = scorer.embed_image(feats, boxes)
    return emb[0] if squeeze else emb


def info_nce(scorer: ScorerModel, features, boxes, ids, mask,
             duplicate_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric in-batch contrastive loss.

    duplicate_mask[i, j] True marks off-diagonal pairs whose captions are
    content-identical; those are excluded as negatives in both directions.
    """
    img = scorer.embed_image(features, boxes)
    txt = scorer.embed_text(ids, mask)
    logits = scorer.temperature * img @ txt.T
    if duplicate_mask is not None:
        logits = logits.masked_fill(duplicate_mask, float("-inf"))
    labels = torch.arange(len(logits), device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def _caption_duplicate_mask(ids: torch.Tensor) -> torch.Tensor:
    eq = (ids[:, None, :] == ids[None, :, :]).all(dim=-1)
    eq.fill_diagonal_(False)
    return eq


def retrieval_top1(scorer: ScorerModel, features, boxes, ids, mask,
                   batch: int = 32, seed: int = 0) -> float:
    """Image->text top-1 retrieval over candidate pools of `batch` captions.

    A retrieval counts as correct when the best-scoring candidate caption is
    content-identical to the true one (template captions can collide).
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    hits, total = 0, 0
    with torch.no_grad():
        for lo in range(0, len(order) - batch + 1, batch):
            sel = torch.as_tensor(order[lo:lo + batch])
            img = scorer.embed_image(features[sel], boxes[sel])
            txt = scorer.embed_text(ids[sel], mask[sel])
            best = (img @ txt.T).argmax(dim=1)
            for i in range(batch):
                hits += int(torch.equal(ids[sel[best[i]]], ids[sel[i]]))
                total += 1
    return hits / max(total, 1)


@dataclass
class ScorerTrainResult:
    scorer: ScorerModel
    history: list = field(default_factory=list)
    final_retrieval: float = 0.0


def train_scorer(train_tensors: dict, val_tensors: dict, seed: int = 0,
                 steps: int = 6000, batch: int = 64, lr: float = 1e-3,
                 weight_decay: float = 1e-3, retrieval_threshold: float = 0.9,
                 holdout: int = 512, eval_every: int = 400,
                 config: ScorerConfig | None = None) -> ScorerTrainResult:
    """Train the dual encoder; raises ScorerTrainingError below threshold.

    Tensor dicts carry: features (N x M x D), boxes (N x M x 4),
    ids (N x L), mask (N x L). Retrieval quality peaks before the training
    loss bottoms out, so the last `holdout` corpus rows are excluded from
    training batches and the checkpoint with the best holdout retrieval is
    returned (the external validation set plays no part in selection).
    """
    if config is None:
        config = ScorerConfig(text_vocab=int(train_tensors["ids"].max()) + 1)
    torch.manual_seed(seed)
    scorer = ScorerModel(config)
    opt = torch.optim.AdamW(scorer.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps,
                                                       eta_min=lr * 0.05)
    rng = np.random.default_rng(seed)
    n = len(train_tensors["ids"])
    holdout = min(holdout, max(0, n - batch))
    n_train = n - holdout
    hold = {k: v[n_train:] for k, v in train_tensors.items()} if holdout else None
    history = []
    best = (-1.0, None)

    def holdout_retrieval():
        if hold is None:
            return 0.0
        scorer.eval()
        r = retrieval_top1(scorer, hold["features"], hold["boxes"], hold["ids"],
                           hold["mask"], seed=seed)
        scorer.train()
        return r

    for step in range(steps):
        sel = torch.as_tensor(rng.choice(n_train, size=min(batch, n_train),
                                         replace=False))
        ids = train_tensors["ids"][sel]
        loss = info_nce(scorer, train_tensors["features"][sel],
                        train_tensors["boxes"][sel], ids,
                        train_tensors["mask"][sel],
                        duplicate_mask=_caption_duplicate_mask(ids))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        record = {"step": step, "loss": float(loss.detach())}
        if hold is not None and (step % eval_every == 0 or step == steps - 1) \
                and step >= steps // 4:
            record["holdout_top1"] = holdout_retrieval()
            if record["holdout_top1"] > best[0]:
                best = (record["holdout_top1"],
                        {k: v.detach().clone() for k, v in scorer.state_dict().items()})
        if step % 100 == 0 or "holdout_top1" in record or step == steps - 1:
            history.append(record)
    if best[1] is not None:
        scorer.load_state_dict(best[1])
    scorer.eval()
    top1 = retrieval_top1(scorer, val_tensors["features"], val_tensors["boxes"],
                          val_tensors["ids"], val_tensors["mask"], seed=seed)
    if top1 < retrieval_threshold:
        raise ScorerTrainingError(
            f"validation retrieval top-1 {top1:.3f} below threshold {retrieval_threshold}",
            diagnostics={"retrieval_top1": top1, "history": history,
                         "steps": steps, "batch": batch, "lr": lr, "seed": seed})
    return ScorerTrainResult(scorer=scorer, history=history, final_retrieval=top1)
