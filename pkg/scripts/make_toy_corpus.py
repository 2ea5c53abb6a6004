from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from canon import status_line

# (base, past, past participle)
VERBS: Tuple[Tuple[str, str, str], ...] = (
    ("chase", "chased", "chased"),
    ("see", "saw", "seen"),
    ("take", "took", "taken"),
    ("find", "found", "found"),
    ("eat", "ate", "eaten"),
    ("hold", "held", "held"),
    ("watch", "watched", "watched"),
    ("build", "built", "built"),
    ("paint", "painted", "painted"),
    ("carry", "carried", "carried"),
)
NOUNS = (
    "cat", "dog", "bird", "man", "woman", "child", "teacher", "farmer", "doctor", "king",
    "queen", "boy", "girl", "horse", "pilot", "baker", "sailor", "student", "fox", "wolf",
)
OBJECTS = (
    "ball", "box", "apple", "house", "boat", "letter", "bridge", "picture", "cake", "hat",
    "book", "car", "fish", "key", "lamp", "stone", "chair", "kite", "coin", "rope",
)
ADJS = ("big", "small", "old", "young", "red", "happy", "quiet", "clever", "tall", "brave")

# each template: list of (slot or literal, tag); slots are {adj} {noun} {obj} {past} {pp} {base}
TEMPLATES: Tuple[Tuple[Tuple[str, str], ...], ...] = (
    (("the", "DT"), ("{adj}", "JJ"), ("{noun}", "NN"), ("{past}", "VBD"), ("the", "DT"), ("{obj}", "NN")),
    (("the", "DT"), ("{obj}", "NN"), ("was", "VBD"), ("{pp}", "VBN"), ("by", "IN"), ("the", "DT"), ("{adj}", "JJ"), ("{noun}", "NN")),
    (("did", "VBD"), ("the", "DT"), ("{adj}", "JJ"), ("{noun}", "NN"), ("{base}", "VB"), ("the", "DT"), ("{obj}", "NN"), ("?", ".")),
    (("it", "PRP"), ("was", "VBD"), ("the", "DT"), ("{adj}", "JJ"), ("{noun}", "NN"), ("that", "WDT"), ("{past}", "VBD"), ("the", "DT"), ("{obj}", "NN")),
    (("was", "VBD"), ("the", "DT"), ("{obj}", "NN"), ("{pp}", "VBN"), ("by", "IN"), ("the", "DT"), ("{adj}", "JJ"), ("{noun}", "NN"), ("?", ".")),
)

Tagged = Tuple[Tuple[str, ...], Tuple[str, ...]]


def render(template_id: int, content: Dict[str, str]) -> Tagged:
    words: List[str] = []
    tags: List[str] = []
    for item, tag in TEMPLATES[template_id]:
        words.append(item.format(**content) if item.startswith("{") else item)
        tags.append(tag)
    return tuple(words), tuple(tags)


def make_corpus(n: int, seed: int = 0) -> List[Tuple[Tagged, Tagged]]:
    """n (source, target) paraphrase pairs: one content rendered in two different templates."""
    rng = np.random.default_rng(seed)
    out: List[Tuple[Tagged, Tagged]] = []
    for _ in range(n):
        v = VERBS[int(rng.integers(len(VERBS)))]
        content = {
            "adj": ADJS[int(rng.integers(len(ADJS)))],
            "noun": NOUNS[int(rng.integers(len(NOUNS)))],
            "obj": OBJECTS[int(rng.integers(len(OBJECTS)))],
            "base": v[0],
            "past": v[1],
            "pp": v[2],
        }
        a, b = rng.choice(len(TEMPLATES), size=2, replace=False)
        out.append((render(int(a), content), render(int(b), content)))
    return out


def write_corpus(out_dir: Path, pairs: Sequence[Tuple[Tagged, Tagged]]) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "pairs": out_dir / "pairs.tsv",
        "tags": out_dir / "pairs.tags",
        "tagged": out_dir / "tagged.txt",
    }
    with open(paths["pairs"], "w", encoding="utf-8", newline="\n") as fp, open(
        paths["tags"], "w", encoding="utf-8", newline="\n"
    ) as ft, open(paths["tagged"], "w", encoding="utf-8", newline="\n") as fg:
        for (xw, xt), (yw, yt) in pairs:
            fp.write(" ".join(xw) + "\t" + " ".join(yw) + "\n")
            ft.write(" ".join(xt) + "\t" + " ".join(yt) + "\n")
            for w, t in ((xw, xt), (yw, yt)):
                fg.write(" ".join(f"{a}/{b}" for a, b in zip(w, t)) + "\n")
    return paths


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(description="Write a template-based paraphrase corpus with gold POS tags.")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--n", type=int, default=2000, help="number of (source, target) pairs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if args.n < 1:
        ap.error("--n must be >= 1")
    paths = write_corpus(Path(args.out), make_corpus(args.n, args.seed))
    status_line("PASS_TOY_CORPUS", n=args.n, seed=args.seed, out=args.out)
    for name, p in paths.items():
        print(f"{name}={p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
