from __future__ import annotations

import csv
import math
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from canon import status_line, write_json
from corpus import Sentence, Triple, Vocabulary, decode, encode
from paraphrase_model import (
    ParaphraseModel,
    beam_search,
    encode_content_batch,
    encode_style_batch,
    generate_batch,
)
from runtime.models import CMA_CSV_HEADER, EVAL_CSV_KEYS, EvalReport
from syntax import Tagger, edit_distance, tag_tokens

Tokens = Sequence[str]

BLEU_MAX_ORDER = 4
BLEU_SMOOTH_EPS = 0.1
DEFAULT_BLOCK_ROWS = 1024


class MetricInputError(ValueError):
    pass


def _check_aligned(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> None:
    if len(candidates) != len(references):
        raise MetricInputError(f"{len(candidates)} candidates for {len(references)} references")
    if len(candidates) == 0:
        raise MetricInputError("empty corpus")


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_order: int = BLEU_MAX_ORDER) -> float:
    """Corpus BLEU on a 0-100 scale, single reference.

    Orders with no candidate n-grams anywhere in the corpus are left out of the geometric
    mean; an order with candidate n-grams but no matches contributes eps/total.
    """
    _check_aligned(candidates, references)
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = 0
    ref_len = 0
    for c, r in zip(candidates, references):
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            cn = _ngrams(c, n)
            rn = _ngrams(r, n)
            matches[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        p = m / t if m > 0 else BLEU_SMOOTH_EPS / t
        logs.append(math.log(p))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> Tuple[float, float, float]:
    _check_aligned(candidates, references)
    r1 = r2 = rl = 0.0
    for c, r in zip(candidates, references):
        for n in (1, 2):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            overlap = sum(min(v, rn[g]) for g, v in cn.items())
            f = _f1(overlap, sum(cn.values()), sum(rn.values()))
            if n == 1:
                r1 += f
            else:
                r2 += f
        rl += _f1(lcs_length(c, r), len(c), len(r))
    k = len(candidates)
    return r1 / k, r2 / k, rl / k


@lru_cache(maxsize=1)
def _stemmer():
    from nltk.stem.porter import PorterStemmer

    return PorterStemmer()


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer().stem(word)


def meteor_alignment(c: Tokens, r: Tokens) -> List[Tuple[int, int]]:
    """(candidate position, reference position) pairs: exact stage, then Porter-stem stage."""
    used_c = [False] * len(c)
    used_r = [False] * len(r)
    pairs: List[Tuple[int, int]] = []
    for key in (lambda w: w, stem):
        r_keys = [key(w) for w in r]
        for i, w in enumerate(c):
            if used_c[i]:
                continue
            kw = key(w)
            for j, rk in enumerate(r_keys):
                if not used_r[j] and rk == kw:
                    used_c[i] = used_r[j] = True
                    pairs.append((i, j))
                    break
    pairs.sort()
    return pairs


def _count_chunks(pairs: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    prev: Optional[Tuple[int, int]] = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(c: Tokens, r: Tokens) -> float:
    pairs = meteor_alignment(c, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(c)
    rec = m / len(r)
    f_mean = 10 * p * rec / (rec + 9 * p)
    penalty = 0.5 * (_count_chunks(pairs) / m) ** 3
    return f_mean * (1 - penalty)


def meteor_simplified(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    _check_aligned(candidates, references)
    return sum(meteor_sentence(c, r) for c, r in zip(candidates, references)) / len(candidates)


def ed_metrics(
    generated: Sequence[Tokens],
    exemplars: Sequence[Tokens],
    references: Sequence[Tokens],
    tagger: Optional[Tagger],
) -> Tuple[float, float]:
    if not (len(generated) == len(exemplars) == len(references)):
        raise MetricInputError("generated, exemplars and references are not aligned")
    if not generated:
        raise MetricInputError("empty corpus")
    ed_e = ed_r = 0
    for g, z, y in zip(generated, exemplars, references):
        g_tags = tag_tokens(g, tagger)
        ed_e += edit_distance(g_tags, tag_tokens(z, tagger))
        ed_r += edit_distance(g_tags, tag_tokens(y, tagger))
    n = len(generated)
    return ed_e / n, ed_r / n


def _as_f64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_features(A: np.ndarray, B: np.ndarray) -> None:
    if A.ndim != 2 or B.ndim != 2:
        raise MetricInputError("feature matrices must be 2-D")
    if A.shape[1] != B.shape[1]:
        raise MetricInputError(f"feature dimension mismatch: {A.shape[1]} != {B.shape[1]}")
    if A.shape[0] != B.shape[0]:
        raise MetricInputError(f"row count mismatch: {A.shape[0]} != {B.shape[0]}")
    if A.shape[0] < 1:
        raise MetricInputError("need at least one row")


def similarity_matrix(A, B) -> np.ndarray:
    A, B = _as_f64(A), _as_f64(B)
    return A @ B.T


def _row_argmax(A: np.ndarray, B: np.ndarray, block_rows: int) -> np.ndarray:
    out = np.empty(A.shape[0], dtype=np.int64)
    for lo in range(0, A.shape[0], block_rows):
        S = A[lo : lo + block_rows] @ B.T
        out[lo : lo + block_rows] = np.argmax(S, axis=1)
    return out


def content_matching_accuracy(A, B, block_rows: int = DEFAULT_BLOCK_ROWS) -> float:
    """Fraction of rows i whose row argmax of A.B^T (first index on ties) is i."""
    A, B = _as_f64(A), _as_f64(B)
    _check_features(A, B)
    hits = _row_argmax(A, B, max(1, block_rows)) == np.arange(A.shape[0])
    return float(hits.sum()) / A.shape[0]


def cma_from_similarity(S) -> float:
    S = _as_f64(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise MetricInputError("similarity matrix must be square and non-empty")
    return float((np.argmax(S, axis=1) == np.arange(S.shape[0])).sum()) / S.shape[0]


def content_retrieval(queries, targets, block_rows: int = DEFAULT_BLOCK_ROWS) -> np.ndarray:
    """Index of the nearest target (by dot product) for each query row."""
    Q, T = _as_f64(queries), _as_f64(targets)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.shape[1] != T.shape[1]:
        raise MetricInputError(f"feature dimension mismatch: {Q.shape[1]} != {T.shape[1]}")
    return _row_argmax(Q, T, max(1, block_rows))


def cma_diagnosis(A, B, worst_k: int = 5, block_rows: int = DEFAULT_BLOCK_ROWS) -> Dict[str, object]:
    """CMA plus the rows with the smallest diagonal margin S[i,i] - max_{j!=i} S[i,j]."""
    A, B = _as_f64(A), _as_f64(B)
    _check_features(A, B)
    block_rows = max(1, block_rows)
    m = A.shape[0]
    margins = np.empty(m, dtype=np.float64)
    hits = 0
    for lo in range(0, m, block_rows):
        S = A[lo : lo + block_rows] @ B.T
        rows = np.arange(lo, lo + S.shape[0])
        hits += int((np.argmax(S, axis=1) == rows).sum())
        diag = S[np.arange(S.shape[0]), rows]
        if m == 1:
            margins[rows] = np.inf
            continue
        off = S.copy()
        off[np.arange(S.shape[0]), rows] = -np.inf
        margins[rows] = diag - off.max(axis=1)
    # a single row has no competitor and no finite margin
    order = [i for i in sorted(range(m), key=lambda i: (margins[i], i)) if np.isfinite(margins[i])][: max(0, worst_k)]
    return {
        "cma": hits / m,
        "m": m,
        "worst_rows": order,
        "worst_margins": [float(margins[i]) for i in order],
    }


def style_retrieval(
    query: Sentence,
    pool: Sequence[Sentence],
    m: ParaphraseModel,
    vocab: Vocabulary,
    top_k: int = 5,
    normalize: bool = True,
) -> List[Tuple[int, float]]:
    """Pool indices ranked by style similarity to `query`, best first, ties by lowest index."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not pool:
        return []
    # identical sentences share one encoding, so duplicates tie exactly
    unique: Dict[Tuple[str, ...], int] = {}
    for s in list(pool) + [query]:
        unique.setdefault(s.tokens, len(unique))
    keys = list(unique)
    feats = _as_f64(encode_style_batch([encode(Sentence(k), vocab) for k in keys], m))
    if normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
    P = feats[[unique[s.tokens] for s in pool]]
    q = feats[unique[query.tokens]]
    scores = P @ q
    order = np.argsort(-scores, kind="stable")[:top_k]
    return [(int(i), float(scores[i])) for i in order]


def generate_for_triples(
    m: ParaphraseModel,
    vocab: Vocabulary,
    triples: Sequence[Triple],
    max_len: int,
    beam_width: int = 1,
    batch_size: int = 256,
) -> List[List[str]]:
    """One generation per (source, exemplar), in input order."""
    src = [encode(t.source, vocab) for t in triples]
    exm = [encode(t.exemplar, vocab) for t in triples]
    out: List[List[str]] = []
    for lo in range(0, len(triples), batch_size):
        c = encode_content_batch(src[lo : lo + batch_size], m, batch_size)
        s = encode_style_batch(exm[lo : lo + batch_size], m, batch_size)
        if beam_width > 1:
            ids = [beam_search(c[i], s[i], m, max_len, beam_width) for i in range(c.shape[0])]
        else:
            ids = generate_batch(c, s, m, max_len)
        out.extend(decode(x, vocab) for x in ids)
    return out


def evaluate_generations(
    generated: Sequence[Tokens],
    triples: Sequence[Triple],
    tagger: Optional[Tagger],
) -> Dict[str, float]:
    refs = [t.target.tokens for t in triples]
    exms = [t.exemplar.tokens for t in triples]
    r1, r2, rl = rouge(generated, refs)
    ed_e, ed_r = ed_metrics(generated, exms, refs, tagger)
    return {
        "bleu": bleu(generated, refs),
        "rouge1": r1,
        "rouge2": r2,
        "rougeL": rl,
        "meteor": meteor_simplified(generated, refs),
        "ed_e": ed_e,
        "ed_r": ed_r,
    }


def content_features(m: ParaphraseModel, vocab: Vocabulary, triples: Sequence[Triple]) -> Tuple[np.ndarray, np.ndarray]:
    A = encode_content_batch([encode(t.source, vocab) for t in triples], m)
    B = encode_content_batch([encode(t.target, vocab) for t in triples], m)
    return _as_f64(A), _as_f64(B)


def evaluate_run(
    m: ParaphraseModel,
    vocab: Vocabulary,
    triples: Sequence[Triple],
    tagger: Optional[Tagger],
    max_len: int = 15,
    beam_width: int = 1,
    block_rows: int = DEFAULT_BLOCK_ROWS,
    model_variant: str = "full",
    normalize_features: bool = True,
    generate_fn: Optional[Callable[[Sequence[Triple]], List[List[str]]]] = None,
) -> EvalReport:
    if not triples:
        raise MetricInputError("empty test set")
    if generate_fn is None:
        generated = generate_for_triples(m, vocab, triples, max_len, beam_width)
    else:
        generated = generate_fn(triples)
    scores = evaluate_generations(generated, triples, tagger)
    A, B = content_features(m, vocab, triples)
    scores["cma"] = content_matching_accuracy(A, B, block_rows)
    checks = {
        "bleu_range": 0.0 <= scores["bleu"] <= 100.0,
        "unit_ranges": all(0.0 <= scores[k] <= 1.0 for k in ("rouge1", "rouge2", "rougeL", "meteor", "cma")),
        "ed_nonneg": scores["ed_e"] >= 0 and scores["ed_r"] >= 0,
    }
    report = EvalReport.with_meta(
        model_variant=model_variant,
        counts={
            "items": len(triples),
            "candidate_tokens": sum(len(g) for g in generated),
            "reference_tokens": sum(t.target.length for t in triples),
            "empty_generations": sum(1 for g in generated if not g),
        },
        notes={
            "bleu": "corpus BLEU-4, single reference, eps-smoothed",
            "rouge": "per-sentence F1, averaged",
            "meteor": "exact then porter-stem matching; no synonym stage",
            "cma_features": "normalized-at-train" if normalize_features else "raw",
        },
        checks=checks,
        verdict="PASS" if all(checks.values()) else "FAIL",
        **scores,
    )
    status_line(
        "PASS_EVALUATE" if report.verdict == "PASS" else "FAIL_EVALUATE",
        items=len(triples),
        bleu=report.bleu,
        meteor=report.meteor,
        ed_e=report.ed_e,
        cma=report.cma,
    )
    return report


def eval_csv_row(report: EvalReport) -> Dict[str, object]:
    d = report.model_dump()
    d["n_items"] = report.counts.get("items", 0)
    return {k: d.get(k, "") for k in EVAL_CSV_KEYS}


def write_eval_report(report: EvalReport, out_dir: Path, csv_name: str = "eval_report.csv") -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path = out_dir / "eval_report.json"
    write_json(json_path, report.model_dump(by_alias=True))
    csv_path = out_dir / csv_name
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EVAL_CSV_KEYS, lineterminator="\n")
        w.writeheader()
        w.writerow(eval_csv_row(report))
    return json_path, csv_path


def append_cma_csv(path: Path, model_variant: str, cma: float, m: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as f:
        if fresh:
            f.write(CMA_CSV_HEADER + "\n")
        f.write(f"{model_variant},{cma:.6f},{m}\n")
    return path
