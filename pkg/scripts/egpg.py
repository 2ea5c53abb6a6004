from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from canon import status_line, write_json
from corpus import (
    CorpusError,
    Sentence,
    Vocabulary,
    encode,
    load_numbered_pairs,
    load_triples,
    tokenize,
    truncate,
    write_triples,
)
from evaluation import (
    MetricInputError,
    append_cma_csv,
    cma_diagnosis,
    content_features,
    evaluate_run,
    style_retrieval,
    write_eval_report,
)
from exemplar_search import mine_corpus
from paraphrase_model import ModelInputError, encode_content, encode_style, generate
from runtime.models import CMADiagnosis, MiningStats, RetrievalListing, RetrievalNeighbor
from runtime.settings import CLISettings, ConfigError, resolve_config
from syntax import (
    PerceptronPOSTagger,
    SidecarTagger,
    Tagger,
    TaggerUnavailableError,
    CachedTagger,
    load_tagger,
    read_tagged_file,
)
from training import CheckpointError, LoadedCheckpoint, fit, load_checkpoint, save_checkpoint

INPUT_ERRORS = (
    FileNotFoundError,
    CorpusError,
    ConfigError,
    CheckpointError,
    TaggerUnavailableError,
    ModelInputError,
    MetricInputError,
)


def _require_file(p: Optional[str], flag: str) -> Optional[Path]:
    if p is None:
        return None
    path = Path(p)
    if not path.is_file():
        raise FileNotFoundError(f"{flag}: no such file: {path}")
    return path


def _pair_sidecar(pairs, line_nos: Sequence[int], tag_path: Path) -> SidecarTagger:
    """Sidecar line k is `<source tags>\\t<target tags>` for line k of the pairs file."""
    lines = tag_path.read_text(encoding="utf-8").splitlines()
    side = SidecarTagger()
    for (x, y), line_no in zip(pairs, line_nos):
        if line_no > len(lines):
            raise CorpusError(f"{tag_path} has {len(lines)} lines; pairs line {line_no} has no tags")
        parts = lines[line_no - 1].split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{tag_path}:{line_no}: expected source and target tags separated by a tab")
        try:
            side.add(x, parts[0].split())
            side.add(y, parts[1].split())
        except ValueError as e:
            raise CorpusError(f"{tag_path}:{line_no}: {e}") from e
    return side


def _eval_tagger(args) -> Tagger:
    if getattr(args, "tagger_model", None):
        return load_tagger(_require_file(args.tagger_model, "--tagger-model"))
    if getattr(args, "tags", None):
        tagged = read_tagged_file(_require_file(args.tags, "--tags"))
        return CachedTagger(PerceptronPOSTagger.train(tagged, seed=args.seed))
    return load_tagger(None)


def cmd_prepare(args) -> int:
    pairs_path = _require_file(args.pairs, "--pairs")
    tags_path = _require_file(args.tags, "--tags")
    model_path = _require_file(args.tagger_model, "--tagger-model")
    pairs, line_nos = load_numbered_pairs(pairs_path, fmt=args.format, max_len=args.max_len)
    if not pairs:
        raise CorpusError(f"{pairs_path}: no usable pairs")
    if tags_path is not None:
        tagger: Tagger = _pair_sidecar(pairs, line_nos, tags_path)
    else:
        tagger = load_tagger(model_path)
    res = mine_corpus(pairs, tagger=tagger, workers=args.workers)
    out = Path(args.out)
    write_triples(out / "triples.jsonl", res.triples)
    st = res.stats()
    stats = MiningStats.with_meta(
        pairs=st["pairs"],
        mined=st["mined"],
        dropped=st["dropped"],
        mean_edit_distance=st["mean_edit_distance"],
        workers=args.workers,
        tagger=getattr(tagger, "name", "tagger"),
        checks=st["checks"],
        verdict=st["verdict"],
    )
    write_json(out / "mining_stats.json", stats.model_dump(by_alias=True))
    print(out / "triples.jsonl")
    return 0 if st["verdict"] == "PASS" else 1


def cmd_train(args) -> int:
    data = _require_file(args.data, "--data")
    valid_path = _require_file(args.valid, "--valid")
    cfg_path = _require_file(args.config, "--config")
    cfg = resolve_config(
        cfg_path,
        {"epochs": args.epochs, "seed": args.seed, "batch_size": args.batch_size},
        ablation=args.ablation,
    )
    train = load_triples(data, max_len=cfg.max_len)
    if not train:
        raise CorpusError(f"{data}: no usable triples")
    valid = load_triples(valid_path, max_len=cfg.max_len) if valid_path else None
    out = Path(args.out)
    res = fit(train, cfg, out_dir=out, valid=valid, resume=args.resume, write_metrics=args.settings.write_metrics)
    res.vocab.save(out / "vocab.json")
    digest = save_checkpoint(res.model, cfg, res.vocab, out / "checkpoint.pt", progress={"epoch": cfg.epochs, "step": res.steps})
    status_line("PASS_TRAIN", ablation=args.ablation, lambda_ccl=cfg.lambda_ccl, lambda_scl=cfg.lambda_scl, digest=digest[:16])
    print(out / "checkpoint.pt")
    return 0


def _load(args) -> LoadedCheckpoint:
    ck = _require_file(args.ckpt, "--ckpt")
    vocab_path = _require_file(getattr(args, "vocab", None), "--vocab")
    expected = Vocabulary.load(vocab_path) if vocab_path else None
    return load_checkpoint(ck, expected_vocab=expected)


def _prepared(text: str, max_len: int, what: str) -> Sentence:
    s = tokenize(text)
    if s.length > max_len:
        status_line("WARN_TRUNCATED", what=what, length=s.length, max_len=max_len)
        s = truncate(s, max_len)
    return s


def cmd_generate(args) -> int:
    ex_file = _require_file(args.exemplars_file, "--exemplars-file")
    exemplars: List[str] = list(args.exemplar or [])
    if ex_file is not None:
        exemplars.extend(ln for ln in ex_file.read_text(encoding="utf-8").splitlines() if ln.strip())
    if not exemplars:
        raise ConfigError("at least one --exemplar or --exemplars-file is required")
    ck = _load(args)
    enc_len = ck.config.max_len
    max_len = args.max_len or ck.config.max_len
    src = _prepared(args.source, enc_len, "source")
    c = encode_content(encode(src, ck.vocab), ck.model)
    beam = args.beam_width or ck.config.beam_width
    for i, z in enumerate(exemplars):
        s = encode_style(encode(_prepared(z, enc_len, f"exemplar[{i}]"), ck.vocab), ck.model)
        ids = generate(c, s, ck.model, max_len, beam_width=beam)
        print(" ".join(ck.vocab.token_of(t) for t in ids))
    return 0


def cmd_evaluate(args) -> int:
    test = _require_file(args.test, "--test")
    ck = _load(args)
    triples = load_triples(test, max_len=ck.config.max_len)
    tagger = _eval_tagger(args)
    report = evaluate_run(
        ck.model,
        ck.vocab,
        triples,
        tagger,
        max_len=ck.config.max_len,
        beam_width=args.beam_width or ck.config.beam_width,
        block_rows=ck.config.eval_block_rows,
        model_variant=args.variant,
        normalize_features=ck.config.normalize_features,
    )
    json_path, csv_path = write_eval_report(report, Path(args.out), args.settings.eval_csv)
    print(json_path)
    print(csv_path)
    return 0 if report.verdict == "PASS" else 1


def cmd_diagnose(args) -> int:
    test = _require_file(args.test, "--test")
    if args.top_k < 1:
        raise ConfigError("--top-k must be >= 1")
    ck = _load(args)
    triples = load_triples(test, max_len=ck.config.max_len)
    if not triples:
        raise CorpusError(f"{test}: no usable triples")
    out = Path(args.out) if args.out else Path(args.ckpt).parent

    if args.mode == "cma":
        A, B = content_features(ck.model, ck.vocab, triples)
        d = cma_diagnosis(A, B, worst_k=args.top_k, block_rows=ck.config.eval_block_rows)
        diag = CMADiagnosis.with_meta(
            model_variant=args.variant,
            cma=d["cma"],
            m=d["m"],
            worst_rows=d["worst_rows"],
            worst_margins=d["worst_margins"],
        )
        write_json(out / f"cma_{args.variant}.json", diag.model_dump(by_alias=True))
        append_cma_csv(out / "cma.csv", args.variant, diag.cma, diag.m)
        print(f"cma={diag.cma:.6f} m={diag.m}")
        for r, mg in zip(diag.worst_rows, diag.worst_margins):
            print(f"worst_row={r} margin={mg:.6f}")
        return 0

    pool = [t.target for t in triples]
    if args.query:
        queries = [_prepared(q, ck.config.max_len, "query") for q in args.query]
    else:
        queries = pool[: max(1, args.queries)]
    listings = []
    for q in queries:
        ranked = style_retrieval(q, pool, ck.model, ck.vocab, args.top_k, ck.config.normalize_features)
        listing = RetrievalListing.with_meta(
            query=q.text,
            top_k=args.top_k,
            neighbors=[
                RetrievalNeighbor(rank=r + 1, index=i, score=sc, text=pool[i].text) for r, (i, sc) in enumerate(ranked)
            ],
        )
        listings.append(listing.model_dump(by_alias=True))
        print(f"# query: {q.text}")
        for nb in listing.neighbors:
            print(f"{nb.rank}\t{nb.index}\t{nb.score:.6f}\t{nb.text}")
    write_json(out / "style_retrieval.json", listings)
    return 0


def cmd_train_tagger(args) -> int:
    tagged = read_tagged_file(_require_file(args.tagged, "--tagged"))
    if not tagged:
        raise CorpusError(f"{args.tagged}: no tagged sentences")
    PerceptronPOSTagger.train(tagged, n_iter=args.iters, seed=args.seed).save(Path(args.out))
    status_line("PASS_TRAIN_TAGGER", sentences=len(tagged), out=args.out)
    return 0


COMMANDS: Dict[str, Callable] = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "train-tagger": cmd_train_tagger,
}


def build_parser(settings: CLISettings) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="egpg", description="Exemplar-guided paraphrase generation pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="mine an exemplar for every (source, target) pair")
    p.add_argument("--pairs", required=True)
    p.add_argument("--tags", help="sidecar of '<source tags>\\t<target tags>' lines, line k for line k of the pairs file")
    p.add_argument("--tagger-model", help="perceptron tagger JSON (from train-tagger)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=settings.workers)
    p.add_argument("--seed", type=int, default=0, help="unused by mining, which is deterministic")
    p.add_argument("--format", choices=["tsv", "jsonl"])
    p.add_argument("--max-len", type=int, default=15)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--valid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=["full", "no-ccl", "no-scl", "no-both"], default="full")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("generate", help="paraphrase one source under one or more exemplars")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", help="reject the checkpoint unless its vocabulary matches this file")
    p.add_argument("--source", required=True)
    p.add_argument("--exemplar", action="append")
    p.add_argument("--exemplars-file")
    p.add_argument("--max-len", type=int)
    p.add_argument("--beam-width", type=int)

    for name in ("evaluate", "diagnose"):
        p = sub.add_parser(name)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--vocab")
        p.add_argument("--test", required=True)
        p.add_argument("--out", required=(name == "evaluate"))
        p.add_argument("--variant", default="full", help="label written into reports")
        if name == "evaluate":
            p.add_argument("--seed", type=int, default=0, help="seed for a tagger trained from --tags")
            p.add_argument("--tags", help="word/TAG corpus; a perceptron tagger is trained from it")
            p.add_argument("--tagger-model")
            p.add_argument("--beam-width", type=int)
        else:
            p.add_argument("--mode", choices=["cma", "style-retrieval"], required=True)
            p.add_argument("--top-k", type=int, default=5)
            p.add_argument("--query", action="append")
            p.add_argument("--queries", type=int, default=5, help="pool sentences used as queries when --query is absent")

    p = sub.add_parser("train-tagger", help="fit a perceptron POS tagger on word/TAG lines")
    p.add_argument("--tagged", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = CLISettings.from_env()
    args = build_parser(settings).parse_args(argv)
    args.settings = settings
    if getattr(args, "workers", 1) < 1:
        status_line("FAIL_USAGE", reason="--workers must be >= 1")
        return 2
    try:
        return COMMANDS[args.command](args)
    except INPUT_ERRORS as e:
        status_line("FAIL_INPUT", command=args.command, error=type(e).__name__)
        print(str(e), file=sys.stderr)
        return 2
    except Exception as e:
        status_line("FAIL_INTERNAL", command=args.command, error=type(e).__name__)
        print(str(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
