import math

import numpy as np
import pytest
import torch

from bigen import viscodec
from bigen.scorer import (ScorerConfig, ScorerModel, ScorerTrainingError,
                          info_nce, similarity, soft_image_embed, train_scorer)


@pytest.fixture()
def small_scorer(tiny_dataset):
    torch.manual_seed(1)
    return ScorerModel(ScorerConfig(text_vocab=len(tiny_dataset.vocab),
                                    hidden=48, content_dim=24, embed_dim=16)).double()


def test_initial_loss_near_log_batch(small_scorer, tiny_split):
    b = 16
    v = tiny_split.scorer_view()
    loss = info_nce(small_scorer, v["features"][:b].double(), v["boxes"][:b].double(),
                    v["ids"][:b], v["mask"][:b])
    assert abs(float(loss.detach()) - math.log(b)) <= 0.1 * math.log(b)


def test_embeddings_unit_norm(small_scorer, tiny_split):
    with torch.no_grad():
        img = small_scorer.embed_image(tiny_split.dense[:6].double(),
                                       tiny_split.boxes[:6].double())
        txt = small_scorer.embed_text(tiny_split.captions[:6],
                                      tiny_split.caption_mask[:6])
    assert float((img.norm(dim=-1) - 1).abs().max()) < 1e-6
    assert float((txt.norm(dim=-1) - 1).abs().max()) < 1e-6


def test_similarity_cosine_identities(small_scorer, tiny_split):
    sims = similarity(small_scorer, tiny_split.dense[:4].double(),
                      tiny_split.boxes[:4].double(), tiny_split.captions[:4],
                      tiny_split.caption_mask[:4])
    img = small_scorer.embed_image(tiny_split.dense[:4].double(),
                                   tiny_split.boxes[:4].double())
    txt = small_scorer.embed_text(tiny_split.captions[:4], tiny_split.caption_mask[:4])
    # explicit normalization oracle
    oracle = (img / img.norm(dim=-1, keepdim=True)
              * (txt / txt.norm(dim=-1, keepdim=True))).sum(-1)
    assert torch.allclose(sims, oracle, atol=1e-12)
    assert float(sims.abs().max()) <= 1.0 + 1e-9
    e = torch.zeros(16, dtype=torch.float64)
    e[0] = 1.0
    assert float((e * e).sum()) == 1.0                      # identical -> 1
    f = torch.zeros(16, dtype=torch.float64)
    f[1] = 1.0
    assert float((e * f).sum()) == 0.0                      # orthogonal -> 0


def test_soft_embed_one_hot_matches_hard_bitwise(small_scorer, tiny_split, tiny_vocab):
    cents = torch.as_tensor(tiny_vocab.centroids)
    toks = tiny_split.tokens[0]
    onehot = torch.zeros(viscodec.M, tiny_vocab.size, dtype=torch.float64)
    onehot[torch.arange(viscodec.M), toks] = 1.0
    boxes = tiny_split.boxes[0].double()
    soft = soft_image_embed(small_scorer, onehot, cents, boxes)
    hard = small_scorer.embed_image(cents[toks][None], boxes[None])[0]
    assert torch.equal(soft, hard)


def test_soft_embed_uniform_rows(small_scorer, tiny_vocab, tiny_split):
    k = tiny_vocab.size
    uniform = torch.full((viscodec.M, k), 1.0 / k, dtype=torch.float64)
    cents = torch.as_tensor(tiny_vocab.centroids)
    boxes = tiny_split.boxes[0].double()
    got = soft_image_embed(small_scorer, uniform, cents, boxes)
    mean_feats = cents.mean(dim=0)[None].expand(viscodec.M, -1)
    want = small_scorer.embed_image(mean_feats[None], boxes[None])[0]
    assert torch.allclose(got, want, atol=1e-12)


def test_soft_embed_rejects_off_simplex(small_scorer, tiny_vocab, tiny_split):
    k = tiny_vocab.size
    bad = torch.full((viscodec.M, k), 1.0 / k, dtype=torch.float64)
    bad[0, 0] += 0.5
    with pytest.raises(ValueError):
        soft_image_embed(small_scorer, bad, torch.as_tensor(tiny_vocab.centroids),
                         tiny_split.boxes[0].double())


def test_soft_embed_gradient_matches_finite_differences(small_scorer, tiny_vocab,
                                                        tiny_split):
    k = tiny_vocab.size
    cents = torch.as_tensor(tiny_vocab.centroids)
    boxes = tiny_split.boxes[0].double()
    g = torch.Generator().manual_seed(0)
    raw = torch.rand(viscodec.M, k, generator=g, dtype=torch.float64)
    soft = (raw / raw.sum(dim=-1, keepdim=True)).requires_grad_(True)
    probe = torch.randn(16, generator=g, dtype=torch.float64)

    def f(s):
        return (soft_image_embed(small_scorer, s, cents, boxes) * probe).sum()

    out = f(soft)
    out.backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(12):
        m, j = int(rng.integers(viscodec.M)), int(rng.integers(k))
        with torch.no_grad():
            plus = soft.detach().clone()
            plus[m, j] += h
            minus = soft.detach().clone()
            minus[m, j] -= h
            # relax simplex validation under perturbation
            fd = (float(soft_image_embed(small_scorer, plus, cents, boxes, atol=1e-3) @ probe)
                  - float(soft_image_embed(small_scorer, minus, cents, boxes, atol=1e-3) @ probe)) / (2 * h)
        an = float(soft.grad[m, j])
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) <= 1e-4


def test_train_scorer_deterministic_and_failure_diagnostics(tiny_split):
    view = tiny_split.scorer_view()
    runs = []
    for _ in range(2):
        res = train_scorer(view, view, seed=5, steps=8, batch=8,
                           retrieval_threshold=0.0)
        runs.append(torch.cat([p.flatten() for p in res.scorer.parameters()]))
    assert torch.equal(runs[0], runs[1])
    with pytest.raises(ScorerTrainingError) as exc:
        train_scorer(view, view, seed=5, steps=3, batch=8, retrieval_threshold=1.1)
    assert "retrieval_top1" in exc.value.diagnostics
