import math

import numpy as np
import pytest
import torch

from bigen import sampling, training
from bigen.training import (TrainConfig, TrainingDivergedError, caption_ce_loss,
                            clip_image_loss, grid_ce_loss, lr_at,
                            sample_mask_plans, scst_loss, sequence_log_prob,
                            smoothed_cross_entropy)


def test_reference_defaults_present():
    cfg = TrainConfig()
    cfg.validate()
    assert cfg.lr_base == 5e-5
    assert cfg.warmup_frac == 0.05
    assert cfg.stage2_lr == 1e-6
    assert cfg.weight_decay == 1e-2
    assert cfg.label_smoothing == 0.2
    assert cfg.grad_clip == 1.0
    assert tuple(cfg.betas) == (0.9, 0.999)


def test_config_validation():
    for bad in (dict(lr_base=0.0), dict(label_smoothing=1.0), dict(gumbel_tau=0.0),
                dict(grad_clip=-1), dict(caption_features="raw"),
                dict(alternation=(0, 0))):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_lr_schedule_endpoints():
    base, total = 5e-5, 1000
    assert lr_at(0, total, base, 0.05) == 0.0
    warmup = math.ceil(0.05 * total)
    assert lr_at(warmup, total, base, 0.05) == pytest.approx(base)
    assert lr_at(total - 1, total, base, 0.05) < 2e-3 * base
    mid = [lr_at(s, total, base, 0.05) for s in range(warmup, total, 50)]
    assert all(a >= b for a, b in zip(mid, mid[1:]))


def test_smoothed_ce_uniform_logits_any_smoothing():
    v = 10
    logits = torch.zeros(4, v, dtype=torch.float64)
    targets = torch.arange(4) % v
    for eps in (0.0, 0.2, 0.7):
        loss = smoothed_cross_entropy(logits, targets, eps)
        assert torch.allclose(loss, torch.full_like(loss, math.log(v)))


def test_smoothed_ce_hand_computed():
    # two classes, logits (2, 0): p = (e2, 1)/ (e2+1)
    logits = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
    target = torch.tensor([0])
    z = math.log(math.exp(2.0) + 1.0)
    logp = np.array([2.0 - z, -z])
    eps = 0.2
    want = -((1 - eps) * logp[0] + (eps / 2) * (logp[0] + logp[1]))
    got = float(smoothed_cross_entropy(logits, target, eps))
    assert abs(got - want) < 1e-12
    # perfect prediction, eps=0 -> 0
    confident = torch.tensor([[80.0, 0.0]], dtype=torch.float64)
    assert float(smoothed_cross_entropy(confident, target, 0.0)) < 1e-12


def test_caption_loss_uniform_and_errors(tiny_model, tiny_split, tiny_dataset):
    with torch.no_grad():
        tiny_model.text_head.weight.zero_()
        tiny_model.text_head.bias.zero_()
    v = tiny_model.config.text_vocab
    dense = tiny_split.dense[:3].double()
    boxes = tiny_split.boxes[:3].double()
    caps = tiny_split.captions[:3]
    mask = tiny_split.caption_mask[:3]
    for eps in (0.0, 0.2):
        loss, raw = caption_ce_loss(tiny_model, dense, boxes, caps, mask, smoothing=eps)
        assert float(loss.detach()) == pytest.approx(math.log(v))
        assert float(raw) == pytest.approx(math.log(v))
    with pytest.raises(ValueError):
        caption_ce_loss(tiny_model, dense, boxes, caps, torch.zeros_like(mask))


def test_grid_loss_uniform_masked_only(tiny_model, tiny_split):
    with torch.no_grad():
        tiny_model.image_head.weight.zero_()
        tiny_model.image_head.bias.zero_()
    k = tiny_model.config.image_vocab
    disc = tiny_split.discrete[:2].double()
    boxes = tiny_split.boxes[:2].double()
    caps, mask = tiny_split.captions[:2], tiny_split.caption_mask[:2]
    toks = tiny_split.tokens[:2]
    plans = torch.ones(2, 64, dtype=torch.bool)
    loss, _ = grid_ce_loss(tiny_model, disc, boxes, caps, mask, toks, plans)
    assert float(loss.detach()) == pytest.approx(math.log(k))
    with pytest.raises(ValueError):
        grid_ce_loss(tiny_model, disc, boxes, caps, mask, toks,
                     torch.zeros(2, 64, dtype=torch.bool))


def test_grid_loss_ignores_unmasked_slots(tiny_model, tiny_split):
    disc = tiny_split.discrete[:2].double()
    boxes = tiny_split.boxes[:2].double()
    caps, mask = tiny_split.captions[:2], tiny_split.caption_mask[:2]
    toks = tiny_split.tokens[:2].clone()
    plans = torch.zeros(2, 64, dtype=torch.bool)
    plans[:, :16] = True
    loss1, _ = grid_ce_loss(tiny_model, disc, boxes, caps, mask, toks, plans)
    # changing targets at unmasked slots cannot change the loss
    toks2 = toks.clone()
    toks2[:, 16:] = (toks2[:, 16:] + 1) % tiny_model.config.image_vocab
    loss2, _ = grid_ce_loss(tiny_model, disc, boxes, caps, mask, toks2, plans)
    assert float(loss1.detach()) == float(loss2.detach())
    # changing input features at masked slots cannot either (mask feature wins)
    disc2 = disc.clone()
    disc2[:, :16] += 10.0
    loss3, _ = grid_ce_loss(tiny_model, disc2, boxes, caps, mask, toks, plans)
    assert float(loss1.detach()) == float(loss3.detach())


def test_mask_plans_cover_range():
    rng = np.random.default_rng(0)
    plans = sample_mask_plans(rng, 200)
    sizes = plans.sum(dim=1)
    assert int(sizes.min()) >= 1 and int(sizes.max()) <= 64
    assert len(set(sizes.tolist())) > 20


def test_scst_zero_advantage_zero_gradient(tiny_model, tiny_split, tiny_dataset):
    dense = tiny_split.dense[:2].double()
    boxes = tiny_split.boxes[:2].double()
    vocab = tiny_dataset.vocab
    gen = torch.Generator().manual_seed(0)
    loss, info = scst_loss(tiny_model, dense, boxes,
                           reward_fn=lambda d: np.zeros(len(d)),
                           generator=gen, bos=vocab.bos_id, eos=vocab.eos_id,
                           pad=vocab.pad_id)
    assert float(loss.detach()) == 0.0
    loss.backward()
    for p in tiny_model.parameters():
        if p.grad is not None:
            assert float(p.grad.abs().max()) == 0.0


def test_scst_positive_advantage_increases_sample_logprob(tiny_model, tiny_split,
                                                          tiny_dataset):
    dense = tiny_split.dense[:2].double()
    boxes = tiny_split.boxes[:2].double()
    vocab = tiny_dataset.vocab
    gen = torch.Generator().manual_seed(3)
    sampled = sampling.decode_caption(tiny_model, dense, boxes, mode="sample",
                                      generator=gen, bos=vocab.bos_id,
                                      eos=vocab.eos_id, pad=vocab.pad_id)
    adv = torch.tensor([1.0, 2.0], dtype=torch.float64)
    loss = -(adv * sequence_log_prob(tiny_model, dense, boxes, sampled,
                                     pad=vocab.pad_id)).mean()
    tiny_model.zero_grad()
    loss.backward()
    grad_loss = [p.grad.detach().clone() if p.grad is not None else None
                 for p in tiny_model.parameters()]
    tiny_model.zero_grad()
    logp = sequence_log_prob(tiny_model, dense, boxes, sampled,
                             pad=vocab.pad_id).mean()
    logp.backward()
    inner = 0.0
    for g, p in zip(grad_loss, tiny_model.parameters()):
        if g is not None and p.grad is not None:
            inner += float((g * p.grad).sum())
    # moving along -grad(loss) increases the sample log-prob
    assert inner < 0.0


def test_scst_reports_reward_and_baseline(tiny_model, tiny_split, tiny_dataset):
    vocab = tiny_dataset.vocab
    gen = torch.Generator().manual_seed(1)
    loss, info = scst_loss(tiny_model, tiny_split.dense[:2].double(),
                           tiny_split.boxes[:2].double(),
                           reward_fn=lambda d: np.full(len(d), 0.5),
                           generator=gen, bos=vocab.bos_id, eos=vocab.eos_id,
                           pad=vocab.pad_id)
    assert info["reward"] == 0.5 and info["baseline"] == 0.5
    assert float(loss.detach()) == 0.0


class _FixedScorer:
    """Stub with controllable cosine between image and text embeddings."""

    def __init__(self, cos, dim=8):
        self.cos = cos
        self.dim = dim

    def embed_image(self, feats, boxes):
        e = torch.zeros(feats.shape[0], self.dim, dtype=feats.dtype)
        e[:, 0] = self.cos
        e[:, 1] = math.sqrt(max(0.0, 1 - self.cos ** 2))
        return e + 0.0 * feats.sum() * torch.ones_like(e)  # keep graph connected

    def embed_text(self, ids, mask):
        e = torch.zeros(ids.shape[0], self.dim, dtype=torch.float64)
        e[:, 0] = 1.0
        return e


def test_clip_loss_direct_values(tiny_model, tiny_split, tiny_vocab):
    cents = torch.as_tensor(tiny_vocab.centroids)
    boxes = tiny_split.boxes[:2].double()
    caps, mask = tiny_split.captions[:2], tiny_split.caption_mask[:2]
    g = torch.Generator().manual_seed(0)
    loss, info = clip_image_loss(tiny_model, _FixedScorer(0.8), cents, boxes,
                                 caps, mask, tau=1.0, generator=g)
    assert float(loss.detach()) == pytest.approx(-0.8)
    g = torch.Generator().manual_seed(0)
    loss, info = clip_image_loss(tiny_model, _FixedScorer(-0.3), cents, boxes,
                                 caps, mask, tau=1.0, generator=g)
    assert float(loss.detach()) == 0.0
    loss.backward()
    grads = [p.grad for p in tiny_model.parameters() if p.grad is not None]
    assert all(float(g.abs().max()) == 0.0 for g in grads)  # clamped region
    with pytest.raises(ValueError):
        clip_image_loss(tiny_model, _FixedScorer(0.5), cents, boxes, caps, mask,
                        tau=0.0)
    with pytest.raises(ValueError):
        clip_image_loss(tiny_model, _FixedScorer(0.5), cents, boxes, caps, mask,
                        tau=1.0, estimator="hard")


def test_clip_loss_bounded(tiny_model, tiny_split, tiny_vocab, small_scorer=None):
    from bigen.scorer import ScorerConfig, ScorerModel
    torch.manual_seed(2)
    scorer = ScorerModel(ScorerConfig(text_vocab=25, hidden=32, content_dim=16,
                                      embed_dim=16)).double()
    cents = torch.as_tensor(tiny_vocab.centroids)
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        loss, _ = clip_image_loss(tiny_model, scorer, cents,
                                  tiny_split.boxes[:2].double(),
                                  tiny_split.captions[:2],
                                  tiny_split.caption_mask[:2], tau=1.0, generator=g)
        assert -1.0 <= float(loss.detach()) <= 0.0


def test_stage1_logs_routing_and_clipping(tiny_model, tiny_split):
    cfg = TrainConfig(steps_stage1=12, batch_stage1=4, lr_base=1e-3, seed=0)
    log = training.train_stage1(tiny_model, tiny_split, cfg)
    assert len(log.records) == 12
    for rec in log.records:
        assert rec["grad_norm"] <= cfg.grad_clip + 1e-6
        assert rec["loss"] >= 0.0
        if rec["direction"] == "text":
            assert rec["features"] == "dense"
        else:
            assert rec["features"] == "discrete"
    directions = [r["direction"] for r in log.records]
    assert directions[:4] == ["text", "image", "text", "image"]


def test_stage1_respects_dense_only_routing(tiny_model, tiny_split):
    cfg = TrainConfig(steps_stage1=4, batch_stage1=4, lr_base=1e-3, seed=0,
                      caption_features="dense", synthesis_features="dense")
    log = training.train_stage1(tiny_model, tiny_split, cfg)
    assert all(r["features"] == "dense" for r in log.records)


def test_nan_loss_aborts_with_batch_ids(tiny_model, tiny_split, tmp_path):
    with torch.no_grad():
        tiny_model.text_head.weight[0, 0] = float("nan")
    cfg = TrainConfig(steps_stage1=3, batch_stage1=4, lr_base=1e-3, seed=0)
    log = training.TrainLog(path=tmp_path / "train.log.jsonl")
    with pytest.raises(TrainingDivergedError) as exc:
        training.train_stage1(tiny_model, tiny_split, cfg, log)
    assert exc.value.batch_ids
    text = (tmp_path / "train.log.jsonl").read_text()
    assert "nan_loss" in text and exc.value.batch_ids[0] in text


def test_stage2_runs_both_objectives(tiny_model, tiny_split, tiny_dataset, tiny_vocab):
    from bigen.scorer import ScorerConfig, ScorerModel
    torch.manual_seed(0)
    scorer = ScorerModel(ScorerConfig(text_vocab=len(tiny_dataset.vocab), hidden=32,
                                      content_dim=16, embed_dim=16)).double()
    cfg = TrainConfig(steps_stage2=8, batch_stage2=4, stage2_lr=1e-4, seed=0)
    log = training.train_stage2(tiny_model, tiny_split, cfg, scorer=scorer,
                                centroids=torch.as_tensor(tiny_vocab.centroids),
                                vocab=tiny_dataset.vocab)
    objectives = {r["objective"] for r in log.records}
    assert objectives == {"scst", "grid_ce", "clip"}
    assert all(r["lr"] == cfg.stage2_lr for r in log.records)
    # scorer stayed frozen
    assert all(not p.requires_grad for p in scorer.parameters())


def test_stage2_no_clip_uses_grid_ce_only(tiny_model, tiny_split, tiny_dataset,
                                          tiny_vocab):
    cfg = TrainConfig(steps_stage2=6, batch_stage2=4, stage2_lr=1e-4, seed=0,
                      use_clip_loss=False)
    log = training.train_stage2(tiny_model, tiny_split, cfg, scorer=None,
                                centroids=None, vocab=tiny_dataset.vocab)
    image_objectives = {r["objective"] for r in log.records
                        if r["direction"] == "image"}
    assert image_objectives == {"grid_ce"}
