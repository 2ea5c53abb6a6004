import math
from collections import Counter

import numpy as np
import pytest
import torch

from corpus import Triple, build_vocabulary, tokenize
from evaluation import (
    MetricInputError,
    append_cma_csv,
    bleu,
    cma_diagnosis,
    cma_from_similarity,
    content_matching_accuracy,
    content_retrieval,
    ed_metrics,
    evaluate_generations,
    evaluate_run,
    lcs_length,
    meteor_simplified,
    rouge,
    similarity_matrix,
    style_retrieval,
    write_eval_report,
)
from paraphrase_model import ModelDims, build_model
from runtime.models import EVAL_CSV_HEADER
from syntax import SidecarTagger


def _toks(*sents):
    return [s.split() for s in sents]


# slow references: naive n-gram lists, full LCS table, brute-force alignment scoring


def _ref_ngrams(t, n):
    return [tuple(t[i : i + n]) for i in range(len(t) - n + 1)]


def _ref_bleu(cands, refs):
    m, tot = [0] * 4, [0] * 4
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    for c, r in zip(cands, refs):
        for n in range(1, 5):
            cg = _ref_ngrams(c, n)
            rg = _ref_ngrams(r, n)
            for g in set(cg):
                m[n - 1] += min(cg.count(g), rg.count(g))
            tot[n - 1] += len(cg)
    if c_len == 0 or m[0] == 0:
        return 0.0
    logs = [math.log(mm / t if mm else 0.1 / t) for mm, t in zip(m, tot) if t]
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return 100 * bp * math.exp(sum(logs) / len(logs))


def _ref_lcs(a, b):
    T = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            T[i][j] = T[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(T[i - 1][j], T[i][j - 1])
    return T[-1][-1]


def _ref_f1(o, nc, nr):
    if o == 0:
        return 0.0
    p, r = o / nc, o / nr
    return 2 * p * r / (p + r)


def _ref_rouge(cands, refs):
    out = [0.0, 0.0, 0.0]
    for c, r in zip(cands, refs):
        for k, n in enumerate((1, 2)):
            cg, rg = Counter(_ref_ngrams(c, n)), Counter(_ref_ngrams(r, n))
            out[k] += _ref_f1(sum((cg & rg).values()), len(_ref_ngrams(c, n)), len(_ref_ngrams(r, n)))
        out[2] += _ref_f1(_ref_lcs(c, r), len(c), len(r))
    return tuple(x / len(cands) for x in out)


def _ref_meteor_exact(cands, refs):
    # exact matching only (vocabulary below has no shared stems)
    total = 0.0
    for c, r in zip(cands, refs):
        used = [False] * len(r)
        pairs = []
        for i, w in enumerate(c):
            for j, x in enumerate(r):
                if not used[j] and x == w:
                    used[j] = True
                    pairs.append((i, j))
                    break
        if not pairs:
            continue
        chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
        m = len(pairs)
        p, rc = m / len(c), m / len(r)
        total += (10 * p * rc / (rc + 9 * p)) * (1 - 0.5 * (chunks / m) ** 3)
    return total / len(cands)


def test_bleu_fixtures():
    assert bleu(_toks("the cat sat"), _toks("the cat sat down")) == pytest.approx(71.65, abs=0.01)
    same = _toks("a b c d e", "x y z")
    assert bleu(same, same) == pytest.approx(100.0)
    assert bleu(_toks("a b c"), _toks("x y z")) == 0.0
    with pytest.raises(MetricInputError):
        bleu([], [])


def test_rouge_fixtures():
    assert rouge(_toks("a b c"), _toks("a b c")) == (1.0, 1.0, 1.0)
    assert rouge(_toks("a b"), _toks("c d")) == (0.0, 0.0, 0.0)
    r1, r2, rl = rouge(_toks("a b c"), _toks("a c"))
    assert r1 == pytest.approx(0.8) and r2 == 0.0 and rl == pytest.approx(0.8)
    assert lcs_length("a b c".split(), "a c".split()) == 2


def test_meteor_fixtures():
    assert meteor_simplified(_toks("a b c"), _toks("a b c")) == pytest.approx(1 - 0.5 / 27)
    assert meteor_simplified(_toks("a b c"), _toks("a b c")) == pytest.approx(0.9815, abs=1e-4)
    assert meteor_simplified(_toks("a b"), _toks("c d")) == 0.0
    assert meteor_simplified(_toks("he runs"), _toks("he running")) == pytest.approx(1 - 0.5 / 8)


def test_metrics_match_slow_references_on_random_corpora():
    rng = np.random.default_rng(5)
    words = ["w%d" % i for i in range(6)]
    for _ in range(100):
        k = int(rng.integers(1, 6))
        cands = [[words[i] for i in rng.integers(0, 6, size=int(rng.integers(0, 8)))] for _ in range(k)]
        refs = [[words[i] for i in rng.integers(0, 6, size=int(rng.integers(1, 8)))] for _ in range(k)]
        assert bleu(cands, refs) == pytest.approx(_ref_bleu(cands, refs), abs=1e-9)
        for got, want in zip(rouge(cands, refs), _ref_rouge(cands, refs)):
            assert got == pytest.approx(want, abs=1e-9)
        assert meteor_simplified(cands, refs) == pytest.approx(_ref_meteor_exact(cands, refs), abs=1e-9)


def test_corpus_order_invariance():
    c = _toks("a b c d", "e f", "g h i")
    r = _toks("a b d", "e f g", "g i h")
    perm = [2, 0, 1]
    assert bleu(c, r) == pytest.approx(bleu([c[i] for i in perm], [r[i] for i in perm]), abs=1e-12)
    assert rouge(c, r) == pytest.approx(rouge([c[i] for i in perm], [r[i] for i in perm]), abs=1e-12)


@pytest.fixture
def tagger():
    t = SidecarTagger()
    t.add(tokenize("the cat sat"), ["DT", "NN", "VBD"])
    t.add(tokenize("a dog ran home"), ["DT", "NN", "VBD", "NN"])
    t.add(tokenize("cats sleep"), ["NNS", "VBP"])
    t.add(tokenize("did the cat sit"), ["VBD", "DT", "NN", "VB"])
    return t


def test_ed_metrics(tagger):
    gen = _toks("the cat sat", "cats sleep")
    exm = _toks("a dog ran home", "cats sleep")
    ref = _toks("did the cat sit", "the cat sat")
    ed_e, ed_r = ed_metrics(gen, exm, ref, tagger)
    # (1 + 0) / 2 and (2 + 3) / 2
    assert ed_e == pytest.approx(0.5)
    assert ed_r == pytest.approx(2.5)
    assert ed_metrics(exm, exm, ref, tagger)[0] == 0.0
    assert ed_metrics([[]], [["cats", "sleep"]], [["cats", "sleep"]], tagger) == (2.0, 2.0)


def test_cma_fixtures():
    eye = np.eye(4)
    assert content_matching_accuracy(eye, eye) == 1.0
    assert content_matching_accuracy([[1, 0], [0, 1]], [[0, 1], [1, 0]]) == 0.0
    S = [[0.9, 0.1, 0.0], [0.2, 0.1, 0.7], [0.0, 0.0, 0.5]]
    assert cma_from_similarity(S) == pytest.approx(2 / 3)
    with pytest.raises(MetricInputError):
        content_matching_accuracy(np.ones((2, 3)), np.ones((2, 4)))


def test_cma_ties_break_to_lowest_index():
    A = np.array([[1.0, 0.0], [1.0, 0.0]])
    # row 1 ties between columns 0 and 1: lowest index wins, so row 1 misses
    assert content_matching_accuracy(A, A) == 0.5


def test_cma_blockwise_equals_full_and_row_scaling():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(500, 32))
    B = A + 0.5 * rng.normal(size=(500, 32))
    full = float((np.argmax(A @ B.T, axis=1) == np.arange(500)).mean())
    assert content_matching_accuracy(A, B, block_rows=500) == full
    assert content_matching_accuracy(A, B, block_rows=37) == full
    assert content_matching_accuracy(A, B, block_rows=1) == full
    scaled = A * rng.uniform(0.1, 10.0, size=(500, 1))
    assert content_matching_accuracy(scaled, B) == content_matching_accuracy(A, B)
    N = A / np.linalg.norm(A, axis=1, keepdims=True)
    assert content_matching_accuracy(N, N) == 1.0
    assert np.allclose(similarity_matrix(A[:3], B[:3]), A[:3] @ B[:3].T)


def test_cma_diagnosis_and_content_retrieval():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    B = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.5]])
    d = cma_diagnosis(A, B, worst_k=2, block_rows=2)
    assert d["cma"] == pytest.approx(1 / 3)
    # margins: 0.0, -0.5, 0.0
    assert d["worst_rows"] == [1, 0]
    assert d["worst_margins"] == [-0.5, 0.0]
    assert content_retrieval(A, B).tolist() == [0, 2, 0]


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    triples = [
        Triple(tokenize("the cat sat"), tokenize("did the cat sit"), tokenize("a dog ran home")),
        Triple(tokenize("cats sleep"), tokenize("the cat sat"), tokenize("cats sleep")),
    ]
    vocab = build_vocabulary([s for t in triples for s in (t.source, t.target, t.exemplar)])
    m = build_model(ModelDims(vocab_size=len(vocab), d_emb=8, k_c=6, k_s=8, style_layers=1, style_heads=2, style_ff=16, max_len=15))
    return m, vocab, triples


def test_style_retrieval_ranking(tiny_model):
    m, vocab, _ = tiny_model
    pool = [tokenize("cats sleep"), tokenize("the cat sat"), tokenize("a dog ran home"), tokenize("the cat sat")]
    ranked = style_retrieval(tokenize("a dog ran home"), pool, m, vocab, top_k=10)
    assert [i for i, _ in ranked][0] == 2
    assert ranked[0][1] == pytest.approx(1.0)
    assert sorted(i for i, _ in ranked) == [0, 1, 2, 3]
    order = [i for i, _ in ranked]
    assert order.index(3) == order.index(1) + 1
    assert len(style_retrieval(tokenize("cats sleep"), pool, m, vocab, top_k=2)) == 2


def test_oracle_and_empty_generations(tiny_model, tagger):
    _, _, triples = tiny_model
    oracle = evaluate_generations([list(t.target.tokens) for t in triples], triples, tagger)
    assert oracle["bleu"] == pytest.approx(100.0)
    assert (oracle["rouge1"], oracle["rouge2"], oracle["rougeL"]) == (1.0, 1.0, 1.0)
    assert oracle["ed_r"] == 0.0
    empty = evaluate_generations([[], []], triples, tagger)
    assert empty["bleu"] == empty["rouge1"] == empty["rouge2"] == empty["rougeL"] == empty["meteor"] == 0.0


def test_evaluate_run_report(tmp_path, tiny_model, tagger):
    m, vocab, triples = tiny_model
    oracle = evaluate_run(m, vocab, triples, tagger, generate_fn=lambda ts: [list(t.target.tokens) for t in ts])
    assert oracle.bleu == pytest.approx(100.0) and oracle.ed_r == 0.0
    assert oracle.verdict == "PASS"
    assert 0.0 <= oracle.cma <= 1.0
    assert oracle.counts["items"] == 2
    j1, c1 = write_eval_report(oracle, tmp_path)
    first = j1.read_text(encoding="utf-8")
    write_eval_report(oracle, tmp_path)
    assert j1.read_text(encoding="utf-8") == first
    assert c1.read_text(encoding="utf-8").splitlines()[0] == EVAL_CSV_HEADER


def test_append_cma_csv(tmp_path):
    p = tmp_path / "cma.csv"
    append_cma_csv(p, "full", 0.5, 10)
    append_cma_csv(p, "no-both", 0.25, 10)
    assert p.read_text(encoding="utf-8").splitlines() == ["model_variant,cma,m", "full,0.500000,10", "no-both,0.250000,10"]
