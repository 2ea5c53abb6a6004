from __future__ import annotations

import json
import random
from collections import OrderedDict
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Tuple

from canon import hash_canon, status_line
from corpus import Sentence

TagSequence = Tuple[str, ...]

SEED_TAGGED_PATH = Path(__file__).resolve().parent / "data" / "seed_tagged.txt"

PTB_TAGSET: FrozenSet[str] = frozenset(
    [
        "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS",
        "NNP", "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO",
        "UH", "VB", "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT", "WP", "WP$", "WRB",
        ".", ",", ":", "``", "''", "$", "#", "-LRB-", "-RRB-", "(", ")", "-NONE-",
    ]
)


class TaggerUnavailableError(RuntimeError):
    pass


class Tagger(Protocol):
    name: str

    def tag(self, tokens: Sequence[str]) -> TagSequence:
        ...


def pos_tag(s: Sentence, tagger: Optional[Tagger]) -> TagSequence:
    if tagger is None:
        raise TaggerUnavailableError("no tagger model or sidecar tag file was provided")
    tags = tuple(tagger.tag(s.tokens))
    if len(tags) != s.length:
        raise ValueError(f"tagger returned {len(tags)} tags for {s.length} tokens")
    return tags


def tag_tokens(tokens: Sequence[str], tagger: Optional[Tagger]) -> TagSequence:
    # Empty token lists (e.g. empty generations) tag to the empty sequence.
    if len(tokens) == 0:
        return ()
    return pos_tag(Sentence(tuple(tokens)), tagger)


def tag_corpus(sentences: Iterable[Sentence], tagger: Optional[Tagger]) -> List[TagSequence]:
    return [pos_tag(s, tagger) for s in sentences]


def edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Unit-cost Levenshtein distance over tag symbols, two-row DP."""
    if tuple(a) == tuple(b):
        return 0
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    if la < lb:
        a, b = b, a
        la, lb = lb, la
    column = list(range(lb + 1))
    for x in range(1, la + 1):
        column[0] = x
        last = x - 1
        for y in range(1, lb + 1):
            old = column[y]
            cost = 0 if a[x - 1] == b[y - 1] else 1
            column[y] = min(column[y] + 1, column[y - 1] + 1, last + cost)
            last = old
    return column[lb]


class PerceptronPOSTagger:
    """Averaged-perceptron POS tagger backed by nltk's implementation.

    Weights persist as plain JSON so models can ship with the repo without pickle.
    """

    name = "perceptron"

    def __init__(self, impl) -> None:
        self._impl = impl

    @staticmethod
    def _blank():
        from nltk.tag.perceptron import PerceptronTagger

        return PerceptronTagger(load=False)

    @classmethod
    def train(
        cls,
        tagged_sentences: Sequence[Sequence[Tuple[str, str]]],
        n_iter: int = 5,
        seed: int = 0,
    ) -> "PerceptronPOSTagger":
        if not tagged_sentences:
            raise ValueError("no tagged sentences to train on")
        impl = cls._blank()
        sents = [[(w, t) for w, t in s] for s in tagged_sentences]
        state = random.getstate()
        random.seed(seed)
        try:
            impl.train(sents, nr_iter=n_iter)
        finally:
            random.setstate(state)
        return cls(impl)

    @staticmethod
    def _pretrained_impl():
        from nltk.tag.perceptron import PerceptronTagger

        return PerceptronTagger()

    @classmethod
    def load_default(cls) -> "PerceptronPOSTagger":
        """nltk's pretrained English model, or the bundled seed model when its data is not installed."""
        try:
            return cls(cls._pretrained_impl())
        except (LookupError, OSError) as e:
            status_line("WARN_TAGGER_FALLBACK", reason=type(e).__name__, model="bundled")
            return cls.load_bundled()

    @classmethod
    def load_bundled(cls, n_iter: int = 8, seed: int = 0) -> "PerceptronPOSTagger":
        if not SEED_TAGGED_PATH.exists():
            raise TaggerUnavailableError(
                "no pretrained tagger available; pass --tagger-model or a --tags sidecar file"
            )
        out = cls.train(read_tagged_file(SEED_TAGGED_PATH), n_iter=n_iter, seed=seed)
        out.name = "perceptron:bundled"
        return out

    @classmethod
    def load(cls, path: Path) -> "PerceptronPOSTagger":
        path = Path(path)
        if not path.exists():
            raise TaggerUnavailableError(f"tagger model not found: {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        impl = cls._blank()
        impl.model.weights = {f: dict(w) for f, w in d["weights"].items()}
        impl.tagdict = dict(d["tagdict"])
        impl.classes = set(d["classes"])
        impl.model.classes = impl.classes
        return cls(impl)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = {
            "schema": "egpg.perceptron_tagger.v1",
            "weights": self._impl.model.weights,
            "tagdict": self._impl.tagdict,
            "classes": sorted(self._impl.classes),
        }
        path.write_text(json.dumps(d, sort_keys=True) + "\n", encoding="utf-8")

    @property
    def classes(self) -> FrozenSet[str]:
        return frozenset(self._impl.classes)

    def tag(self, tokens: Sequence[str]) -> TagSequence:
        return tuple(t for _, t in self._impl.tag(list(tokens)))


class SidecarTagger:
    """Serves pre-computed tags, keyed by the exact token sequence."""

    name = "sidecar"

    def __init__(self, tagset: Optional[FrozenSet[str]] = PTB_TAGSET) -> None:
        self._tags: Dict[Tuple[str, ...], TagSequence] = {}
        self._tagset = tagset

    def __len__(self) -> int:
        return len(self._tags)

    def add(self, s: Sentence, tags: Sequence[str]) -> None:
        tags = tuple(tags)
        if len(tags) < s.length:
            raise ValueError(f"sidecar has {len(tags)} tags for {s.length} tokens: {s.text!r}")
        # sentences may have been truncated after tagging
        tags = tags[: s.length]
        if self._tagset is not None:
            bad = [t for t in tags if t not in self._tagset]
            if bad:
                raise ValueError(f"tags outside the declared tagset: {sorted(set(bad))}")
        prev = self._tags.get(s.tokens)
        if prev is not None and prev != tags:
            raise ValueError(f"conflicting sidecar tags for {s.text!r}")
        self._tags[s.tokens] = tags

    def tag(self, tokens: Sequence[str]) -> TagSequence:
        key = tuple(tokens)
        got = self._tags.get(key)
        if got is None:
            raise TaggerUnavailableError(f"no sidecar tags for sentence: {' '.join(key)!r}")
        return got

    def digest(self) -> str:
        return hash_canon(sorted([list(k), list(v)] for k, v in self._tags.items()))

    @classmethod
    def from_files(
        cls,
        sentences: Sequence[Sentence],
        tag_path: Path,
        tagset: Optional[FrozenSet[str]] = PTB_TAGSET,
    ) -> "SidecarTagger":
        lines = [ln.split() for ln in Path(tag_path).read_text(encoding="utf-8").splitlines()]
        if len(lines) < len(sentences):
            raise ValueError(f"sidecar {tag_path} has {len(lines)} lines for {len(sentences)} sentences")
        out = cls(tagset=tagset)
        for s, tags in zip(sentences, lines):
            out.add(s, tags)
        status_line("PASS_LOAD_SIDECAR_TAGS", path=tag_path, sentences=len(out))
        return out


class CachedTagger:
    """Memoises another tagger; least recently used entries beyond `max_entries` are evicted."""

    name = "cached"

    def __init__(self, inner: Tagger, max_entries: int = 50_000) -> None:
        if max_entries < 1:
            raise ValueError("max_entries must be >= 1")
        self.inner = inner
        self.name = f"cached:{getattr(inner, 'name', 'tagger')}"
        self.max_entries = max_entries
        self._cache: "OrderedDict[Tuple[str, ...], TagSequence]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._cache)

    def tag(self, tokens: Sequence[str]) -> TagSequence:
        key = tuple(tokens)
        got = self._cache.get(key)
        if got is not None:
            self._cache.move_to_end(key)
            return got
        got = tuple(self.inner.tag(key))
        self._cache[key] = got
        if len(self._cache) > self.max_entries:
            self._cache.popitem(last=False)
        return got


def read_tagged_file(path: Path) -> List[List[Tuple[str, str]]]:
    """Read `word/TAG word/TAG ...` lines (training data for the perceptron)."""
    out: List[List[Tuple[str, str]]] = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln:
            continue
        sent = []
        for item in ln.split():
            w, _, t = item.rpartition("/")
            if not w or not t:
                raise ValueError(f"bad tagged token: {item!r}")
            sent.append((w.lower(), t))
        out.append(sent)
    return out


def load_tagger(model_path: Optional[Path] = None) -> Tagger:
    if model_path is not None:
        return CachedTagger(PerceptronPOSTagger.load(Path(model_path)))
    return CachedTagger(PerceptronPOSTagger.load_default())
