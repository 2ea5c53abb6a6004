from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from canon import canon_json_line, hash_canon, status_line

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
SPECIALS: Tuple[str, ...] = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

DEFAULT_MAX_LEN = 15
DEFAULT_D_EMB = 300

IdSequence = Tuple[int, ...]


class CorpusError(ValueError):
    pass


class EmptyInputError(CorpusError):
    pass


class RecordParseError(CorpusError):
    def __init__(self, path: str, line_no: int, detail: str):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.path = path
        self.line_no = line_no
        self.detail = detail


class EmbeddingDimensionError(CorpusError):
    pass


@dataclass(frozen=True)
class Sentence:
    tokens: Tuple[str, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) == 0:
            raise EmptyInputError("sentence has no tokens")
        for t in self.tokens:
            if not t:
                raise EmptyInputError("sentence contains an empty token")

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Triple:
    source: Sentence
    target: Sentence
    exemplar: Sentence

    def as_record(self) -> Dict[str, str]:
        return {"source": self.source.text, "target": self.target.text, "exemplar": self.exemplar.text}


def tokenize(text: str) -> Sentence:
    if text is None:
        raise EmptyInputError("empty input")
    toks = [t.lower() for t in text.strip().split()]
    if not toks:
        raise EmptyInputError("empty input")
    return Sentence(tuple(toks))


def truncate(s: Sentence, max_len: int) -> Sentence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if s.length <= max_len:
        return s
    return Sentence(s.tokens[:max_len])


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: Tuple[str, ...]
    token_to_id: Dict[str, int] = field(compare=False, repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        if tuple(self.id_to_token[: len(SPECIALS)]) != SPECIALS:
            raise CorpusError("vocabulary must start with the special symbols")
        mapping = {t: i for i, t in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise CorpusError("duplicate token in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def sos_id(self) -> int:
        return SOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if idx < 0 or idx >= len(self.id_to_token):
            raise IndexError(f"id out of range: {idx}")
        return self.id_to_token[idx]

    def digest(self) -> str:
        return hash_canon(list(self.id_to_token))

    def to_json(self) -> Dict[str, Any]:
        return {"schema": "egpg.vocab.v1", "tokens": list(self.id_to_token), "vocab_hash": self.digest()}

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "Vocabulary":
        v = Vocabulary(tuple(d["tokens"]))
        expected = d.get("vocab_hash")
        if expected and expected != v.digest():
            raise CorpusError("vocabulary hash mismatch")
        return v

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: Path) -> "Vocabulary":
        return Vocabulary.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocabulary(corpus: Iterable[Sentence], min_freq: int = 1) -> Vocabulary:
    counts: Counter = Counter()
    n = 0
    for s in corpus:
        counts.update(s.tokens)
        n += 1
    if n == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_freq and tok not in SPECIALS]
    kept.sort(key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(SPECIALS + tuple(tok for tok, _ in kept))


def encode(s: Sentence, v: Vocabulary, add_eos: bool = False) -> IdSequence:
    ids = [v.id_of(t) for t in s.tokens]
    if add_eos:
        ids.append(EOS_ID)
    return tuple(ids)


def decode(ids: Sequence[int], v: Vocabulary) -> List[str]:
    out: List[str] = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, SOS_ID):
            continue
        out.append(v.token_of(i))
    return out


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        fmt = fmt.lower()
        if fmt not in ("jsonl", "tsv"):
            raise CorpusError(f"unknown corpus format: {fmt}")
        return fmt
    return "jsonl" if path.suffix.lower() in (".jsonl", ".json") else "tsv"


def _iter_records(path: Path, fmt: str, n_fields: int) -> Iterable[Tuple[int, Optional[List[str]], str]]:
    # yields (line_no, fields or None, error detail)
    names = ("source", "target", "exemplar")[:n_fields]
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if fmt == "tsv":
                parts = line.split("\t")
                if len(parts) < n_fields:
                    yield line_no, None, f"expected {n_fields} tab-separated fields, got {len(parts)}"
                    continue
                yield line_no, parts[:n_fields], ""
            else:
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as e:
                    yield line_no, None, f"invalid JSON: {e.msg}"
                    continue
                if not isinstance(d, dict):
                    yield line_no, None, "record is not a JSON object"
                    continue
                vals = []
                for k in names:
                    v = d.get(k, "")
                    if v is None:
                        v = ""
                    if not isinstance(v, str):
                        yield line_no, None, f"field {k} is not a string"
                        break
                    vals.append(v)
                else:
                    yield line_no, vals, ""


def _read_sentences(
    path: Path, fmt: Optional[str], n_fields: int, max_len: int, strict: bool
) -> Tuple[List[Tuple[Sentence, ...]], List[int], Dict[str, int]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    fmt2 = _infer_format(path, fmt)
    rows: List[Tuple[Sentence, ...]] = []
    line_nos: List[int] = []
    stats = {"records": 0, "loaded": 0, "skipped_empty": 0, "skipped_malformed": 0, "truncated": 0}
    for line_no, fields, detail in _iter_records(path, fmt2, n_fields):
        stats["records"] += 1
        if fields is None:
            if strict:
                raise RecordParseError(str(path), line_no, detail)
            stats["skipped_malformed"] += 1
            continue
        if any(not x.strip() for x in fields):
            stats["skipped_empty"] += 1
            continue
        sents = []
        for x in fields:
            s = tokenize(x)
            if s.length > max_len:
                stats["truncated"] += 1
                s = truncate(s, max_len)
            sents.append(s)
        rows.append(tuple(sents))
        line_nos.append(line_no)
        stats["loaded"] += 1
    return rows, line_nos, stats


def read_triples(
    path: Path, fmt: Optional[str] = None, max_len: int = DEFAULT_MAX_LEN, strict: bool = False
) -> Tuple[List[Triple], Dict[str, int]]:
    rows, _, stats = _read_sentences(Path(path), fmt, 3, max_len, strict)
    return [Triple(*r) for r in rows], stats


def load_triples(
    path: Path, fmt: Optional[str] = None, max_len: int = DEFAULT_MAX_LEN, strict: bool = False
) -> List[Triple]:
    triples, stats = read_triples(path, fmt=fmt, max_len=max_len, strict=strict)
    status_line(
        "PASS_LOAD_TRIPLES",
        path=path,
        loaded=stats["loaded"],
        skipped=stats["skipped_empty"] + stats["skipped_malformed"],
    )
    return triples


def read_pairs(
    path: Path, fmt: Optional[str] = None, max_len: int = DEFAULT_MAX_LEN, strict: bool = False
) -> Tuple[List[Tuple[Sentence, Sentence]], Dict[str, int]]:
    pairs, _, stats = read_numbered_pairs(path, fmt=fmt, max_len=max_len, strict=strict)
    return pairs, stats


def read_numbered_pairs(
    path: Path, fmt: Optional[str] = None, max_len: int = DEFAULT_MAX_LEN, strict: bool = False
) -> Tuple[List[Tuple[Sentence, Sentence]], List[int], Dict[str, int]]:
    """Like read_pairs, plus the 1-based file line number of every kept pair."""
    rows, line_nos, stats = _read_sentences(Path(path), fmt, 2, max_len, strict)
    return [(r[0], r[1]) for r in rows], line_nos, stats


def load_numbered_pairs(
    path: Path, fmt: Optional[str] = None, max_len: int = DEFAULT_MAX_LEN, strict: bool = False
) -> Tuple[List[Tuple[Sentence, Sentence]], List[int]]:
    pairs, line_nos, stats = read_numbered_pairs(path, fmt=fmt, max_len=max_len, strict=strict)
    status_line(
        "PASS_LOAD_PAIRS",
        path=path,
        loaded=stats["loaded"],
        skipped=stats["skipped_empty"] + stats["skipped_malformed"],
    )
    return pairs, line_nos


def load_pairs(
    path: Path, fmt: Optional[str] = None, max_len: int = DEFAULT_MAX_LEN, strict: bool = False
) -> List[Tuple[Sentence, Sentence]]:
    return load_numbered_pairs(path, fmt=fmt, max_len=max_len, strict=strict)[0]


def write_triples(path: Path, triples: Sequence[Triple]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triples:
            f.write(canon_json_line(t.as_record()) + "\n")


def load_pretrained_embeddings(
    path: Path, v: Vocabulary, d_emb: int = DEFAULT_D_EMB, seed: int = 0
) -> Tuple[np.ndarray, float]:
    """Build a |V| x d_emb float32 matrix from a GloVe-style text file.

    Rows for vocabulary tokens found in the file are copied verbatim; the rest are
    drawn from uniform(-0.1, 0.1). Returns (matrix, coverage) where coverage is the
    fraction of non-special vocabulary tokens found in the file.
    """
    rng = np.random.default_rng(seed)
    mat = rng.uniform(-0.1, 0.1, size=(len(v), d_emb)).astype(np.float32)
    mat[PAD_ID] = 0.0
    found = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            parts = raw.rstrip().split(" ")
            if len(parts) < 2:
                continue
            # word2vec-style "count dim" header
            if line_no == 1 and len(parts) == 2 and parts[0].isdigit() and parts[1].isdigit():
                continue
            dim = len(parts) - 1
            if dim != d_emb:
                raise EmbeddingDimensionError(f"{path}:{line_no}: dimension {dim} != configured d_emb {d_emb}")
            tok = parts[0]
            idx = v.token_to_id.get(tok)
            if idx is None or idx < len(SPECIALS):
                continue
            mat[idx] = np.asarray(parts[1:], dtype=np.float32)
            found.add(idx)
    n_regular = max(1, len(v) - len(SPECIALS))
    coverage = len(found) / n_regular
    status_line("PASS_LOAD_EMBEDDINGS", path=path, found=len(found), coverage=coverage)
    return mat, coverage
