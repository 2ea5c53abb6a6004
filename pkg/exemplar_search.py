from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from canon import status_line
from corpus import Sentence, Triple
from syntax import TagSequence, Tagger, edit_distance, tag_corpus

LENGTH_WINDOW = 2
OVERLAP_MARGIN = 2


@dataclass(frozen=True)
class LengthIndex:
    buckets: Dict[int, Tuple[int, ...]]
    size: int

    def candidates_for(self, length: int, window: int = LENGTH_WINDOW) -> Iterator[int]:
        for L in range(length - window, length + window + 1):
            for idx in self.buckets.get(L, ()):
                yield idx

    def visited_lengths(self, length: int, window: int = LENGTH_WINDOW) -> List[int]:
        return [L for L in range(length - window, length + window + 1) if L in self.buckets]


@dataclass(frozen=True)
class ExemplarMatch:
    index: int
    distance: int


def build_index(pool: Sequence[Sentence]) -> LengthIndex:
    if len(pool) == 0:
        raise ValueError("exemplar pool is empty")
    tmp: Dict[int, List[int]] = {}
    for i, s in enumerate(pool):
        tmp.setdefault(s.length, []).append(i)
    return LengthIndex(buckets={k: tuple(v) for k, v in sorted(tmp.items())}, size=len(pool))


def shared_word_count(a: Sentence, b: Sentence) -> int:
    return len(set(a.tokens) & set(b.tokens))


def is_candidate(c: Sentence, y: Sentence) -> bool:
    if abs(c.length - y.length) > LENGTH_WINDOW:
        return False
    return shared_word_count(c, y) + OVERLAP_MARGIN <= y.length


def _is_verbatim(c: Sentence, y: Sentence, source: Optional[Sentence]) -> bool:
    # repeated words let a copy of Y slip past the distinct-word overlap filter
    return c.tokens == y.tokens or (source is not None and c.tokens == source.tokens)


def find_exemplar_match(
    y: Sentence,
    y_tags: TagSequence,
    pool: Sequence[Sentence],
    pool_tags: Sequence[TagSequence],
    index: LengthIndex,
    exclude: Optional[int] = None,
    source: Optional[Sentence] = None,
) -> Optional[ExemplarMatch]:
    best: Optional[Tuple[int, int]] = None
    for idx in index.candidates_for(y.length):
        if idx == exclude:
            continue
        c = pool[idx]
        if not is_candidate(c, y) or _is_verbatim(c, y, source):
            continue
        d = edit_distance(pool_tags[idx], y_tags)
        key = (d, idx)
        if best is None or key < best:
            best = key
    if best is None:
        return None
    return ExemplarMatch(index=best[1], distance=best[0])


def find_exemplar(
    y: Sentence,
    y_tags: TagSequence,
    pool: Sequence[Sentence],
    pool_tags: Sequence[TagSequence],
    index: LengthIndex,
    exclude: Optional[int] = None,
    source: Optional[Sentence] = None,
) -> Optional[int]:
    m = find_exemplar_match(y, y_tags, pool, pool_tags, index, exclude=exclude, source=source)
    return None if m is None else m.index


def verify_mined_triple(t: Triple) -> bool:
    return is_candidate(t.exemplar, t.target) and not _is_verbatim(t.exemplar, t.target, t.source)


@dataclass
class MiningResult:
    triples: List[Triple]
    kept_pairs: List[int]
    distances: List[int]
    dropped: int

    def stats(self) -> Dict[str, object]:
        n = len(self.triples) + self.dropped
        mean_d = (sum(self.distances) / len(self.distances)) if self.distances else 0.0
        filters_ok = all(verify_mined_triple(t) for t in self.triples)
        return {
            "schema": "egpg.mining_stats.v1",
            "pairs": n,
            "mined": len(self.triples),
            "dropped": self.dropped,
            "mean_edit_distance": mean_d,
            "checks": {"filters_ok": filters_ok},
            "verdict": "PASS" if filters_ok else "FAIL",
        }


# Worker-process state, installed once per process by _init_worker.
_W_POOL: Sequence[Sentence] = ()
_W_POOL_TAGS: Sequence[TagSequence] = ()
_W_INDEX: Optional[LengthIndex] = None


def _init_worker(pool, pool_tags, index) -> None:
    global _W_POOL, _W_POOL_TAGS, _W_INDEX
    _W_POOL, _W_POOL_TAGS, _W_INDEX = pool, pool_tags, index


def _search_one(job: Tuple[Sentence, Sentence, TagSequence, Optional[int]]) -> Optional[ExemplarMatch]:
    x, y, y_tags, exclude = job
    return find_exemplar_match(y, y_tags, _W_POOL, _W_POOL_TAGS, _W_INDEX, exclude=exclude, source=x)


def _own_source_index(i: int, x: Sentence, pool: Sequence[Sentence], pool_is_sources: bool) -> Optional[int]:
    if pool_is_sources:
        return i
    if i < len(pool) and pool[i] == x:
        return i
    return None


def mine_corpus(
    pairs: Sequence[Tuple[Sentence, Sentence]],
    pool: Optional[Sequence[Sentence]] = None,
    tagger: Optional[Tagger] = None,
    pool_tags: Optional[Sequence[TagSequence]] = None,
    target_tags: Optional[Sequence[TagSequence]] = None,
    workers: int = 1,
    chunksize: int = 64,
) -> MiningResult:
    """Attach a mined exemplar to every (X, Y) pair; pairs without a candidate are dropped.

    The pool defaults to the source side of `pairs`, in which case pair i's own source
    (pool index i) is never chosen. A candidate identical to the pair's X or Y is never
    chosen either. Output order follows input order for any `workers`.
    """
    pool_is_sources = pool is None
    if pool is None:
        pool = [x for x, _ in pairs]
    pool = list(pool)
    if pool_tags is None:
        pool_tags = tag_corpus(pool, tagger)
    if target_tags is None:
        target_tags = tag_corpus([y for _, y in pairs], tagger)
    if len(pool_tags) != len(pool) or len(target_tags) != len(pairs):
        raise ValueError("tag sequences are not aligned with their sentences")
    index = build_index(pool)

    jobs = [
        (x, y, target_tags[i], _own_source_index(i, x, pool, pool_is_sources))
        for i, (x, y) in enumerate(pairs)
    ]

    if workers <= 1:
        matches = [
            find_exemplar_match(y, yt, pool, pool_tags, index, exclude=ex, source=x) for x, y, yt, ex in jobs
        ]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(pool, list(pool_tags), index)
        ) as ex:
            matches = list(ex.map(_search_one, jobs, chunksize=max(1, chunksize)))

    triples: List[Triple] = []
    kept: List[int] = []
    dists: List[int] = []
    dropped = 0
    for i, ((x, y), m) in enumerate(zip(pairs, matches)):
        if m is None:
            dropped += 1
            continue
        triples.append(Triple(source=x, target=y, exemplar=pool[m.index]))
        kept.append(i)
        dists.append(m.distance)

    res = MiningResult(triples=triples, kept_pairs=kept, distances=dists, dropped=dropped)
    st = res.stats()
    status_line(
        "PASS_MINE_CORPUS" if st["verdict"] == "PASS" else "FAIL_MINE_CORPUS",
        pairs=st["pairs"],
        mined=st["mined"],
        dropped=st["dropped"],
        mean_ed=st["mean_edit_distance"],
        workers=workers,
    )
    return res
