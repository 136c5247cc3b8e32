"""End-to-end evaluation of a checkpoint on one split.

Caption direction: greedy-decode every image, score BLEU@1/4, ROUGE-L and the
consensus caption metric against the split's references. Image direction:
sample a token grid per caption with mask-predict-k, render it, and score the
Fréchet embedding distance against the real images, R-precision (easy/hard)
and the clamped-cosine consistency score, all through the frozen scorer.
"""

from __future__ import annotations

import numpy as np
import torch

from . import metrics, sampling, viscodec
from .data import SplitTensors
from .seeding import derive_seed


def _batched(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def embed_images(scorer, features: torch.Tensor, boxes: torch.Tensor,
                 batch: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for sl in _batched(len(features), batch):
            out.append(scorer.embed_image(features[sl], boxes[sl]).cpu().numpy())
    return np.concatenate(out, axis=0)


def embed_texts(scorer, ids: torch.Tensor, mask: torch.Tensor,
                batch: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for sl in _batched(len(ids), batch):
            out.append(scorer.embed_text(ids[sl], mask[sl]).cpu().numpy())
    return np.concatenate(out, axis=0)


def decode_split_captions(model, split: SplitTensors, vocab,
                          features_kind: str = "dense", batch: int = 64) -> list[list[str]]:
    feats_all = split.dense if features_kind == "dense" else split.discrete
    decoded = []
    for sl in _batched(len(split), batch):
        ids = sampling.decode_caption(model, feats_all[sl], split.boxes[sl],
                                      mode="greedy", bos=vocab.bos_id,
                                      eos=vocab.eos_id, pad=vocab.pad_id)
        decoded.extend(vocab.decode(row.tolist()) for row in ids)
    return decoded


def generate_split_images(model, split: SplitTensors, visual_vocab,
                          k: int = 4, seed: int = 0, temperature0: float = 1.0,
                          batch: int = 64) -> np.ndarray:
    """Token grids for every caption of the split, N x M."""
    schedule = sampling.MaskPredictSchedule(k=k, grid_len=model.config.grid_len)
    cents = torch.as_tensor(visual_vocab.centroids)
    gen = torch.Generator().manual_seed(derive_seed(seed, "mask-predict"))
    tokens = []
    for sl in _batched(len(split), batch):
        res = sampling.mask_predict_k(model, split.captions[sl], split.caption_mask[sl],
                                      schedule, cents, temperature0=temperature0,
                                      generator=gen)
        tokens.append(res.tokens.cpu().numpy())
    return np.concatenate(tokens, axis=0)


def generated_features(token_grids: np.ndarray, visual_vocab) -> torch.Tensor:
    """Render each sampled grid and re-extract dense features (full pipeline)."""
    out = np.empty((len(token_grids), viscodec.M, viscodec.D), dtype=np.float32)
    for i, tokens in enumerate(token_grids):
        raster = viscodec.render_tokens(tokens, visual_vocab)
        out[i] = viscodec.extract_grid_features(raster).features
    return torch.from_numpy(out)


def evaluate_model(model, scorer, split: SplitTensors, vocab, visual_vocab,
                   caption_features: str = "dense", k: int = 4, seed: int = 0,
                   rprec_negatives: int = 99, caption_model=None,
                   provenance: dict | None = None) -> metrics.MetricReport:
    """Full battery; `caption_model` overrides the decoder for the
    separate-models configuration (images still come from `model`)."""
    model.eval()
    scorer.eval()
    report = metrics.MetricReport(provenance=provenance or {})
    report.provenance.update({"examples": len(split), "seed": seed, "k": k})

    # ---- image -> text ----------------------------------------------------
    decoded = decode_split_captions(caption_model or model, split, vocab,
                                    caption_features)
    refs = split.references
    stats = metrics.CiderCorpusStats.from_references(refs)
    cider_scores = [metrics.cider_d(c, r, stats) for c, r in zip(decoded, refs)]
    report.values["cider_d"] = float(np.mean(cider_scores))
    report.values["bleu1"] = metrics.corpus_bleu(decoded, refs, max_n=1)
    report.values["bleu4"] = metrics.corpus_bleu(decoded, refs, max_n=4)
    report.values["rouge_l"] = float(np.mean([metrics.rouge_l(c, r)
                                              for c, r in zip(decoded, refs)]))
    report.tables["cider_d"] = cider_scores
    report.tables["decoded_captions"] = [" ".join(c) for c in decoded]

    # ---- text -> image ----------------------------------------------------
    token_grids = generate_split_images(model, split, visual_vocab, k=k, seed=seed)
    gen_feats = generated_features(token_grids, visual_vocab)
    gen_emb = embed_images(scorer, gen_feats, split.boxes)
    real_emb = embed_images(scorer, split.dense, split.boxes)
    report.values["toy_fid"] = metrics.fid(real_emb, gen_emb)

    txt_emb = embed_texts(scorer, split.captions, split.caption_mask)
    cs, cs_table = metrics.clip_score(gen_emb, txt_emb)
    report.values["clipscore_toy"] = cs
    report.tables["clipscore_toy"] = cs_table

    def encode_text(word_lists):
        ids = torch.tensor([vocab.encode(w) for w in word_lists], dtype=torch.long)
        return embed_texts(scorer, ids, ids != vocab.pad_id)

    captions_words = [vocab.decode(row.tolist()) for row in split.captions]
    easy = metrics.r_precision(gen_emb, captions_words, encode_text, variant="easy",
                               negatives=rprec_negatives,
                               seed=derive_seed(seed, "rprec-easy"))
    hard = metrics.r_precision(gen_emb, captions_words, encode_text, variant="hard",
                               negatives=rprec_negatives,
                               seed=derive_seed(seed, "rprec-hard"),
                               categories=vocab.categories)
    report.values["rprec_easy"] = easy.fraction
    report.values["rprec_hard"] = hard.fraction
    report.tables["rprec_easy"] = easy.per_example
    report.tables["rprec_hard"] = hard.per_example
    report.provenance["rprec_hard_skipped"] = hard.skipped
    report.validate_bounds()
    return report
