"""Caption and image evaluation battery.

Caption side: BLEU@N, ROUGE-L, CIDEr-D (consensus tf-idf n-gram cosine with
count clipping and a Gaussian length penalty, scaled to [0, 10]).

Image side: Fréchet distance between Gaussian fits of embedding sets
("toy-FID", computed on the frozen scorer's image embeddings, so values are
internal-comparison only), R-precision (easy: random caption negatives;
hard: same-category word swaps), and a clamped-cosine consistency score
(clipscore analog, 100 * max(cos, 0)).

Everything here is pure numpy/stdlib and order-invariant at the corpus level.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

METRIC_NAMES = ("bleu1", "bleu4", "rouge_l", "cider_d", "toy_fid",
                "rprec_easy", "rprec_hard", "clipscore_toy")
UNAVAILABLE_METRICS = ("meteor", "spice")  # need external linguistic resources


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------
# CIDEr-D
# --------------------------------------------------------------------------

@dataclass
class CiderCorpusStats:
    """Document frequencies over a corpus of reference sets."""
    doc_freq: list            # per n (0-indexed): Counter ngram -> #docs
    log_num_docs: float
    max_n: int = 4

    @classmethod
    def from_references(cls, reference_sets: Sequence[Sequence[Sequence]],
                        max_n: int = 4) -> "CiderCorpusStats":
        doc_freq = [Counter() for _ in range(max_n)]
        for refs in reference_sets:
            seen = [set() for _ in range(max_n)]
            for ref in refs:
                for n in range(1, max_n + 1):
                    seen[n - 1].update(_ngrams(ref, n).keys())
            for n in range(max_n):
                for g in seen[n]:
                    doc_freq[n][g] += 1
        return cls(doc_freq=doc_freq, log_num_docs=math.log(max(len(reference_sets), 1)),
                   max_n=max_n)


def _tfidf(tokens: Sequence, stats: CiderCorpusStats) -> tuple[list[dict], list[float], int]:
    vecs, norms = [], []
    for n in range(1, stats.max_n + 1):
        counts = _ngrams(tokens, n)
        vec = {}
        for g, c in counts.items():
            idf = stats.log_num_docs - math.log(max(1.0, stats.doc_freq[n - 1][g]))
            vec[g] = c * idf
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms, len(tokens)


def cider_d(candidate: Sequence, references: Sequence[Sequence],
            stats: CiderCorpusStats, sigma: float = 6.0) -> float:
    """Consensus score in [0, 10]: clipped tf-idf cosine per n, Gaussian
    length penalty, averaged over n and references, scaled by 10."""
    if len(candidate) == 0:
        return 0.0
    if len(references) == 0:
        raise ValueError("cider_d needs at least one reference")
    cvecs, cnorms, clen = _tfidf(candidate, stats)
    total = np.zeros(stats.max_n)
    for ref in references:
        rvecs, rnorms, rlen = _tfidf(ref, stats)
        penalty = math.exp(-((clen - rlen) ** 2) / (2.0 * sigma ** 2))
        for n in range(stats.max_n):
            dot = sum(min(w, rvecs[n].get(g, 0.0)) * rvecs[n].get(g, 0.0)
                      for g, w in cvecs[n].items())
            if cnorms[n] > 0 and rnorms[n] > 0:
                total[n] += penalty * dot / (cnorms[n] * rnorms[n])
    return float(10.0 * total.mean() / len(references))


# --------------------------------------------------------------------------
# BLEU and ROUGE-L
# --------------------------------------------------------------------------

def _closest_ref_len(clen: int, references) -> int:
    return min((abs(len(r) - clen), len(r)) for r in references)[1]


def bleu(candidate: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Sentence BLEU with clipped n-gram precision and brevity penalty."""
    return corpus_bleu([candidate], [references], max_n)


def corpus_bleu(candidates: Sequence[Sequence],
                reference_sets: Sequence[Sequence[Sequence]], max_n: int = 4) -> float:
    matched = np.zeros(max_n)
    totals = np.zeros(max_n)
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        if len(cand) == 0:
            continue
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            clip = Counter()
            for ref in refs:
                rcounts = _ngrams(ref, n)
                for g in counts:
                    clip[g] = max(clip[g], rcounts.get(g, 0))
            matched[n - 1] += sum(min(c, clip[g]) for g, c in counts.items())
            totals[n - 1] += max(sum(counts.values()), 0)
    if cand_len == 0 or (totals == 0).any() or (matched == 0).any():
        return 0.0
    log_prec = np.log(matched / totals).mean()
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return float(bp * math.exp(log_prec))


def _lcs_len(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, references: Sequence[Sequence],
            beta: float = 1.2) -> float:
    """LCS F-measure, max over references."""
    if len(candidate) == 0:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_len(candidate, ref)
        if lcs == 0:
            continue
        prec = lcs / len(candidate)
        rec = lcs / len(ref)
        best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
    return best


# --------------------------------------------------------------------------
# Fréchet distance between embedding sets
# --------------------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray, clamp: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -clamp:
        raise ValueError(f"matrix not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: np.ndarray, generated: np.ndarray) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross sqrt uses Tr[(S1 S2)^(1/2)] = Tr[(A S2 A)^(1/2)] with
    A = S1^(1/2), computed by symmetric eigendecomposition; tiny negative
    eigenvalues are clamped to zero.
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    for name, arr in (("real", real), ("generated", generated)):
        if arr.ndim != 2:
            raise ValueError(f"{name} embeddings must be 2-D")
        if not np.isfinite(arr).all():
            raise ValueError(f"non-finite {name} embeddings")
        if arr.shape[0] < arr.shape[1] + 1:
            raise ValueError(f"{name} needs at least dim+1 samples, got {arr.shape[0]}")
    mu1, mu2 = real.mean(axis=0), generated.mean(axis=0)
    s1 = np.cov(real, rowvar=False)
    s2 = np.cov(generated, rowvar=False)
    a = _psd_sqrt(s1)
    inner = _psd_sqrt(a @ s2 @ a)
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(inner))
    return max(val, 0.0)


def fid_gaussian(mu1, s1, mu2, s2) -> float:
    """Fréchet distance from Gaussian parameters directly."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    a = _psd_sqrt(np.asarray(s1, dtype=np.float64))
    inner = _psd_sqrt(a @ np.asarray(s2, dtype=np.float64) @ a)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(inner))


# --------------------------------------------------------------------------
# R-precision and the clamped-cosine consistency score
# --------------------------------------------------------------------------

@dataclass
class RPrecisionResult:
    fraction: float
    per_example: list
    skipped: int = 0


def hard_negative(caption: Sequence[str], categories: dict, words_by_category: dict,
                  rng: np.random.Generator) -> Optional[list[str]]:
    """Swap one content word for a different word of the same category."""
    swappable = [i for i, w in enumerate(caption)
                 if categories.get(w) in ("color", "shape", "relation")
                 and len(words_by_category[categories[w]]) > 1]
    if not swappable:
        return None
    i = int(rng.choice(swappable))
    pool = [w for w in words_by_category[categories[caption[i]]] if w != caption[i]]
    out = list(caption)
    out[i] = pool[int(rng.integers(len(pool)))]
    return out


def r_precision(image_embeddings: np.ndarray, captions: Sequence[Sequence[str]],
                encode_text: Callable[[Sequence[Sequence[str]]], np.ndarray],
                variant: str = "easy", negatives: int = 99, seed: int = 0,
                categories: Optional[dict] = None) -> RPrecisionResult:
    """Fraction of images whose true caption ranks strictly top-1 among
    {true + negatives} by embedding dot product. Ties count as failure.

    easy: negatives drawn from the other captions of the set (content
    duplicates of the true caption excluded). hard: negatives are
    same-category single-word swaps of the true caption.
    """
    if variant not in ("easy", "hard"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "hard" and categories is None:
        raise ValueError("hard variant needs the word category map")
    rng = np.random.default_rng(seed)
    captions = [list(c) for c in captions]
    if variant == "hard":
        words_by_category = {}
        for w, cat in categories.items():
            words_by_category.setdefault(cat, []).append(w)
    per_example, skipped = [], 0
    for i, emb in enumerate(image_embeddings):
        true = captions[i]
        if variant == "easy":
            pool = [c for j, c in enumerate(captions) if j != i and c != true]
            # a pool smaller than `negatives` is used whole
            if len(pool) > negatives:
                idx = rng.choice(len(pool), size=negatives, replace=False)
                negs = [pool[j] for j in idx]
            else:
                negs = pool
        else:
            negs = []
            for _ in range(negatives):
                neg = hard_negative(true, categories, words_by_category, rng)
                if neg is None:
                    break
                negs.append(neg)
            if not negs:
                skipped += 1
                per_example.append({"index": i, "skipped": True})
                continue
        embs = encode_text([true] + negs)
        sims = embs @ emb
        top1 = bool(sims[0] > sims[1:].max())
        per_example.append({"index": i, "top1": top1, "true_sim": float(sims[0]),
                            "best_negative_sim": float(sims[1:].max())})
    scored = [p for p in per_example if not p.get("skipped")]
    frac = sum(p["top1"] for p in scored) / max(len(scored), 1)
    return RPrecisionResult(fraction=frac, per_example=per_example, skipped=skipped)


def clip_score(image_embeddings: np.ndarray, text_embeddings: np.ndarray) -> tuple[float, list]:
    """Mean of 100 * max(cos, 0) over matched unit-norm embedding pairs."""
    cos = np.einsum("ne,ne->n", image_embeddings, text_embeddings)
    table = [float(100.0 * max(c, 0.0)) for c in cos]
    return float(np.mean(table)) if table else 0.0, table


# --------------------------------------------------------------------------
# Report container
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    unavailable: tuple = UNAVAILABLE_METRICS

    def validate_bounds(self) -> None:
        v = self.values
        for name in ("bleu1", "bleu4", "rouge_l", "rprec_easy", "rprec_hard"):
            if name in v and not (0.0 <= v[name] <= 1.0):
                raise ValueError(f"{name}={v[name]} out of [0,1]")
        if "cider_d" in v and v["cider_d"] < 0:
            raise ValueError("cider_d negative")
        if "toy_fid" in v and v["toy_fid"] < 0:
            raise ValueError("toy_fid negative")

    def to_json_lines(self) -> str:
        lines = [json.dumps({"metric": k, "value": v, **self.provenance},
                            sort_keys=True) for k, v in sorted(self.values.items())]
        lines += [json.dumps({"metric": m, "value": None, "unavailable": True})
                  for m in self.unavailable]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(k) for k in list(self.values) + list(self.unavailable))
        rows = [f"{k:<{width}}  {v:.4f}" for k, v in sorted(self.values.items())]
        rows += [f"{m:<{width}}  (unavailable: external resources)" for m in self.unavailable]
        return "\n".join(rows) + "\n"
