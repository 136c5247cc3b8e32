import math
from collections import defaultdict

import numpy as np
import pytest

from bigen.metrics import (CiderCorpusStats, MetricReport, bleu, cider_d,
                           clip_score, corpus_bleu, fid, fid_gaussian,
                           hard_negative, r_precision, rouge_l)

CORPUS = [
    [["a", "red", "circle", "above", "a", "green", "square"]],
    [["there", "is", "a", "blue", "triangle"]],
    [["a", "picture", "of", "a", "yellow", "square", "and", "a", "cyan", "circle"]],
    [["the", "purple", "triangle", "left_of", "the", "red", "square"]],
]


@pytest.fixture(scope="module")
def stats():
    return CiderCorpusStats.from_references(CORPUS)


# --------------------------------------------------------------------------
# CIDEr-D
# --------------------------------------------------------------------------

def literal_cider_d(test, refs, crefs, n_=4, sigma=6.0):
    """Independent transcription of the published consensus-metric formula."""
    def cook(s, n=4):
        counts = defaultdict(int)
        for k in range(1, n + 1):
            for i in range(len(s) - k + 1):
                counts[tuple(s[i:i + k])] += 1
        return counts

    doc_freq = defaultdict(float)
    for rs in crefs:
        for ng in set(ng for ref in rs for ng in cook(ref)):
            doc_freq[ng] += 1
    ref_len = np.log(float(len(crefs)))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(n_)]
        norm = [0.0] * n_
        length = 0
        for ngram, term_freq in cnts.items():
            df = np.log(max(1.0, doc_freq[ngram]))
            nn = len(ngram) - 1
            vec[nn][ngram] = float(term_freq) * (ref_len - df)
            norm[nn] += vec[nn][ngram] ** 2
            if nn == 0:
                length += term_freq
        return vec, [np.sqrt(x) for x in norm], length

    vec, norm, length = counts2vec(cook(test))
    score = np.zeros(n_)
    for ref in refs:
        vr, nr, lr = counts2vec(cook(ref))
        delta = float(length - lr)
        val = np.zeros(n_)
        for nn in range(n_):
            for ngram in vec[nn]:
                val[nn] += min(vec[nn][ngram], vr[nn][ngram]) * vr[nn][ngram]
            if norm[nn] != 0 and nr[nn] != 0:
                val[nn] /= norm[nn] * nr[nn]
            val[nn] *= np.e ** (-(delta ** 2) / (2 * sigma ** 2))
        score += val
    return float(np.mean(score) / len(refs) * 10.0)


def test_cider_identical_is_ten(stats):
    assert abs(cider_d(CORPUS[0][0], CORPUS[0], stats) - 10.0) < 1e-6


def test_cider_no_overlap_is_zero(stats):
    assert cider_d(["nothing", "matches", "here", "at", "all"], CORPUS[0], stats) == 0.0


def test_cider_empty_candidate(stats):
    assert cider_d([], CORPUS[0], stats) == 0.0


def test_cider_matches_literal_formula(stats):
    candidates = [
        ["a", "red", "circle"],
        ["a", "blue", "triangle", "above", "a", "green", "square"],
        ["a", "picture", "of", "a", "cyan", "circle"],
        ["there", "is", "a", "blue", "triangle"],
        ["the", "purple", "triangle", "left_of", "the", "red", "square", "and"],
    ]
    for refs in CORPUS:
        for cand in candidates:
            assert abs(cider_d(cand, refs, stats)
                       - literal_cider_d(cand, refs, CORPUS)) <= 1e-6


def test_cider_unclipped_numerator_monotone(stats):
    # adding a correct reference n-gram never lowers the per-n match mass
    ref = CORPUS[0][0]
    partial = ref[:4]
    extended = ref[:5]

    def match_mass(cand):
        from bigen.metrics import _ngrams, _tfidf
        cvecs, _, _ = _tfidf(cand, stats)
        rvecs, _, _ = _tfidf(ref, stats)
        return [sum(min(w, rvecs[n].get(g, 0.0)) * rvecs[n].get(g, 0.0)
                    for g, w in cvecs[n].items()) for n in range(4)]

    for a, b in zip(match_mass(partial), match_mass(extended)):
        assert b >= a - 1e-12


# --------------------------------------------------------------------------
# BLEU / ROUGE-L
# --------------------------------------------------------------------------

def test_bleu_rouge_identical_unity():
    sent = CORPUS[0][0]
    assert bleu(sent, [sent]) == 1.0
    assert rouge_l(sent, [sent]) == 1.0


def test_bleu_brevity_penalty():
    ref = CORPUS[0][0]
    short = ref[:5]
    got = bleu(short, [ref])
    manual = math.exp(1 - len(ref) / len(short))  # all clipped precisions are 1
    assert abs(got - manual) < 1e-12
    assert got < 1.0


def test_bleu_zero_on_disjoint_and_empty():
    assert bleu(["x", "y"], [["a", "b"]]) == 0.0
    assert bleu([], [["a", "b"]]) == 0.0
    assert corpus_bleu([[]], [[["a"]]]) == 0.0


def test_rouge_manual_lcs():
    cand = ["a", "b", "c", "d", "e"]
    ref = ["a", "x", "c", "e", "d"]
    lcs = 3
    p = r = lcs / 5
    beta = 1.2
    manual = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
    assert abs(rouge_l(cand, [ref]) - manual) < 1e-12
    assert rouge_l([], [ref]) == 0.0


def test_rouge_max_over_references():
    cand = ["a", "b", "c"]
    assert rouge_l(cand, [["z", "z"], ["a", "b", "c"]]) == 1.0


# --------------------------------------------------------------------------
# FID
# --------------------------------------------------------------------------

def test_fid_identical_sets_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 6))
    assert fid(x, x.copy()) <= 1e-6


def test_fid_mean_shift_closed_form():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 5))
    d = np.array([1.5, -0.5, 0.0, 2.0, 0.25])
    assert abs(fid(x, x + d) - float(d @ d)) < 1e-6


def test_fid_2d_gaussian_vs_scipy_closed_form():
    from scipy import linalg
    mu1, mu2 = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    s1 = np.array([[2.0, 0.6], [0.6, 1.0]])
    s2 = np.array([[1.0, -0.3], [-0.3, 0.5]])
    covmean = linalg.sqrtm(s1 @ s2).real
    closed = float((mu1 - mu2) @ (mu1 - mu2) + np.trace(s1) + np.trace(s2)
                   - 2 * np.trace(covmean))
    assert abs(fid_gaussian(mu1, s1, mu2, s2) - closed) < 1e-9
    rng = np.random.default_rng(2)
    x = rng.multivariate_normal(mu1, s1, size=10000)
    y = rng.multivariate_normal(mu2, s2, size=10000)
    est = fid(x, y)
    assert abs(est - closed) / closed < 0.05


def test_fid_symmetry_and_permutation_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 4))
    y = rng.normal(size=(300, 4)) + 0.5
    assert abs(fid(x, y) - fid(y, x)) <= 1e-8
    perm = rng.permutation(300)
    assert abs(fid(x, y) - fid(x[perm], y[perm])) <= 1e-8


def test_fid_validation_errors():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(100, 8))
    with pytest.raises(ValueError):
        fid(x[:5], x)                       # needs dim+1 samples
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        fid(bad, x)


# --------------------------------------------------------------------------
# R-precision and the consistency score
# --------------------------------------------------------------------------

def _distinct_captions(n):
    words = ["red", "green", "blue", "yellow", "purple", "cyan"]
    shapes = ["circle", "square", "triangle"]
    caps = []
    for i in range(n):
        caps.append(["a", words[i % 6], shapes[(i // 6) % 3], "tag%d" % (i // 18)])
    return caps


def test_r_precision_perfect_scorer():
    caps = _distinct_captions(60)
    embs = np.eye(60)
    index = {tuple(c): i for i, c in enumerate(caps)}

    def encode(word_lists):
        return np.stack([np.eye(60)[index[tuple(w)]] if tuple(w) in index
                         else np.zeros(60) for w in word_lists])

    res = r_precision(embs, caps, encode, variant="easy", negatives=30, seed=0)
    assert res.fraction == 1.0


def test_r_precision_random_scorer_near_chance():
    caps = _distinct_captions(120)
    rng = np.random.default_rng(0)
    fractions = []
    for rep in range(4):
        embs = rng.normal(size=(120, 32))
        embs /= np.linalg.norm(embs, axis=1, keepdims=True)

        def encode(word_lists, r=rng):
            e = r.normal(size=(len(word_lists), 32))
            return e / np.linalg.norm(e, axis=1, keepdims=True)

        res = r_precision(embs, caps, encode, variant="easy", negatives=99, seed=rep)
        fractions.append(res.fraction)
    assert abs(float(np.mean(fractions)) - 0.01) < 0.02


def test_hard_negative_category_rule():
    cats = {"red": "color", "green": "color", "circle": "shape", "square": "shape",
            "above": "relation", "below": "relation", "a": "other"}
    by_cat = {"color": ["red", "green"], "shape": ["circle", "square"],
              "relation": ["above", "below"]}
    rng = np.random.default_rng(0)
    cap = ["a", "red", "circle", "above", "a", "green", "square"]
    for _ in range(50):
        neg = hard_negative(cap, cats, by_cat, rng)
        assert neg is not None and neg != cap
        diff = [(a, b) for a, b in zip(cap, neg) if a != b]
        assert len(diff) == 1
        old, new = diff[0]
        assert cats[old] == cats[new]
    assert hard_negative(["a", "a"], cats, by_cat, rng) is None


def test_r_precision_hard_skips_unswappable():
    caps = [["a", "red", "circle"], ["a", "a"]]
    embs = np.eye(2, 8)
    cats = {"red": "color", "green": "color", "circle": "shape",
            "square": "shape", "a": "other"}

    def encode(word_lists):
        return np.zeros((len(word_lists), 8))

    res = r_precision(embs, caps, encode, variant="hard", negatives=9, seed=0,
                      categories=cats)
    assert res.skipped == 1


def test_r_precision_ties_fail():
    caps = _distinct_captions(10)
    embs = np.zeros((10, 4))

    def encode(word_lists):
        return np.zeros((len(word_lists), 4))

    res = r_precision(embs, caps, encode, variant="easy", negatives=5, seed=0)
    assert res.fraction == 0.0


def test_clip_score_values():
    a = np.eye(4)
    assert clip_score(a, a)[0] == 100.0
    assert clip_score(a, -a)[0] == 0.0
    mixed, table = clip_score(np.eye(2), np.array([[1.0, 0], [0, -1.0]]))
    assert mixed == 50.0 and table == [100.0, 0.0]


def test_metric_report_bounds_and_rendering():
    rep = MetricReport(values={"bleu1": 0.5, "cider_d": 3.0, "toy_fid": 1.0,
                               "rprec_easy": 0.4})
    rep.validate_bounds()
    text = rep.to_text()
    assert "meteor" in text and "unavailable" in text
    lines = rep.to_json_lines().splitlines()
    assert any('"metric": "bleu1"' in l for l in lines)
    rep.values["bleu1"] = 1.5
    with pytest.raises(ValueError):
        rep.validate_bounds()
