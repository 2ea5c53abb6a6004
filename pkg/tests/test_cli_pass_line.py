import json

import pytest

from corpus import SPECIALS, Vocabulary
from scripts import make_toy_corpus
from scripts.egpg import main
from training import RunLog

TINY_TOML = """\
[train]
batch_size = 8
epochs = 1
learning_rate = 0.001
d_emb = 16
k_c = 16
k_s = 16
style_layers = 1
style_heads = 2
style_ff = 32
prefetch_batches = 0
seed = 3
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("egpg")
    corpus = root / "corpus"
    assert make_toy_corpus.main(["--out", str(corpus), "--n", "60", "--seed", "4"]) == 0
    prep = root / "prep"
    rc = main(["prepare", "--pairs", str(corpus / "pairs.tsv"), "--tags", str(corpus / "pairs.tags"), "--out", str(prep), "--workers", "1"])
    assert rc == 0
    cfg = root / "tiny.toml"
    cfg.write_text(TINY_TOML, encoding="utf-8")
    run = root / "run"
    rc = main(["train", "--data", str(prep / "triples.jsonl"), "--config", str(cfg), "--out", str(run), "--ablation", "no-both"])
    assert rc == 0
    return {"root": root, "corpus": corpus, "prep": prep, "run": run, "config": cfg}


def test_prepare_outputs(pipeline):
    prep = pipeline["prep"]
    lines = (prep / "triples.jsonl").read_text(encoding="utf-8").splitlines()
    assert lines
    assert set(json.loads(lines[0])) == {"source", "target", "exemplar"}
    stats = json.loads((prep / "mining_stats.json").read_text(encoding="utf-8"))
    assert stats["schema"] == "egpg.mining_stats.v1"
    assert stats["pairs"] == 60
    assert stats["mined"] == len(lines)
    assert stats["verdict"] == "PASS"


def test_prepare_is_identical_across_worker_counts(pipeline, tmp_path):
    corpus = pipeline["corpus"]
    rc = main(["prepare", "--pairs", str(corpus / "pairs.tsv"), "--tags", str(corpus / "pairs.tags"), "--out", str(tmp_path), "--workers", "2"])
    assert rc == 0
    assert (tmp_path / "triples.jsonl").read_bytes() == (pipeline["prep"] / "triples.jsonl").read_bytes()


def test_missing_input_exits_2(tmp_path):
    assert main(["prepare", "--pairs", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 2
    assert main(["generate", "--ckpt", str(tmp_path / "nope.pt"), "--source", "a b", "--exemplar", "c d"]) == 2


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", "x", "--out", "y", "--no-such-flag"])
    assert e.value.code == 2


def test_train_outputs_and_ablation(pipeline):
    run = pipeline["run"]
    for name in ("checkpoint.pt", "checkpoint.sha256", "vocab.json", "runlog.jsonl", "last.pt", "best.pt"):
        assert (run / name).exists(), name
    cfg = RunLog.load(run / "runlog.jsonl").config()["config"]
    assert (cfg["lambda_ccl"], cfg["lambda_scl"]) == (0.0, 0.0)
    assert cfg["k_c"] == 16


def test_generate_one_line_per_exemplar(pipeline, capsys):
    src = (pipeline["corpus"] / "pairs.tsv").read_text(encoding="utf-8").splitlines()[0].split("\t")[0]
    capsys.readouterr()
    rc = main(
        [
            "generate", "--ckpt", str(pipeline["run"] / "checkpoint.pt"), "--vocab", str(pipeline["run"] / "vocab.json"),
            "--source", src, "--exemplar", "the cat ran", "--exemplar", "a dog was seen", "--exemplar", "did it rain",
        ]
    )
    out = capsys.readouterr().out
    assert rc == 0
    assert out.count("\n") == 3


def test_generate_rejects_foreign_vocab(pipeline, tmp_path):
    other = tmp_path / "vocab.json"
    Vocabulary(SPECIALS + ("zzz",)).save(other)
    rc = main(["generate", "--ckpt", str(pipeline["run"] / "checkpoint.pt"), "--vocab", str(other), "--source", "a b", "--exemplar", "c d"])
    assert rc == 2


def test_evaluate_writes_report(pipeline, tmp_path):
    rc = main(
        [
            "evaluate", "--ckpt", str(pipeline["run"] / "checkpoint.pt"), "--test", str(pipeline["prep"] / "triples.jsonl"),
            "--out", str(tmp_path), "--tags", str(pipeline["corpus"] / "tagged.txt"), "--variant", "no-both",
        ]
    )
    assert rc == 0
    report = json.loads((tmp_path / "eval_report.json").read_text(encoding="utf-8"))
    assert report["schema"] == "egpg.eval_report.v1"
    assert report["model_variant"] == "no-both"
    assert 0.0 <= report["bleu"] <= 100.0
    assert 0.0 <= report["cma"] <= 1.0
    rows = (tmp_path / "eval_report.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 2 and rows[1].startswith("no-both,")


def test_diagnose_cma(pipeline, tmp_path, capsys):
    capsys.readouterr()
    rc = main(
        [
            "diagnose", "--mode", "cma", "--ckpt", str(pipeline["run"] / "checkpoint.pt"),
            "--test", str(pipeline["prep"] / "triples.jsonl"), "--out", str(tmp_path), "--top-k", "2",
        ]
    )
    out = capsys.readouterr().out.splitlines()
    assert rc == 0
    assert out[0].startswith("cma=")
    assert len(out) == 3
    assert (tmp_path / "cma.csv").read_text(encoding="utf-8").splitlines()[0] == "model_variant,cma,m"
    assert json.loads((tmp_path / "cma_full.json").read_text(encoding="utf-8"))["schema"] == "egpg.cma_diagnosis.v1"


def test_diagnose_style_retrieval(pipeline, tmp_path, capsys):
    capsys.readouterr()
    rc = main(
        [
            "diagnose", "--mode", "style-retrieval", "--ckpt", str(pipeline["run"] / "checkpoint.pt"),
            "--test", str(pipeline["prep"] / "triples.jsonl"), "--out", str(tmp_path), "--top-k", "3", "--queries", "1",
        ]
    )
    out = capsys.readouterr().out.splitlines()
    assert rc == 0
    assert out[0].startswith("# query: ")
    ranked = [ln.split("\t") for ln in out[1:]]
    assert [r[0] for r in ranked] == ["1", "2", "3"]
    scores = [float(r[2]) for r in ranked]
    assert scores == sorted(scores, reverse=True)
    assert len(json.loads((tmp_path / "style_retrieval.json").read_text(encoding="utf-8"))) == 1


def test_train_tagger(pipeline, tmp_path):
    out = tmp_path / "tagger.json"
    assert main(["train-tagger", "--tagged", str(pipeline["corpus"] / "tagged.txt"), "--out", str(out), "--iters", "2"]) == 0
    assert out.exists()


def test_prepare_sidecar_follows_pairs_file_lines(tmp_path):
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text(
        "how do i learn python\twhat is the best way to learn python\n"
        "what time is it\t\n"
        "where can i buy a car\twhere should i purchase a vehicle\n"
        "why is the sky blue\twhat makes the sky look blue\n",
        encoding="utf-8",
    )
    tags = tmp_path / "pairs.tags"
    tags.write_text(
        "WRB VBP PRP VB NNP\tWP VBZ DT JJS NN TO VB NNP\n"
        "WP NN VBZ PRP\t\n"
        "WRB MD PRP VB DT NN\tWRB MD PRP VB DT NN\n"
        "WRB VBZ DT NN JJ\tWP VBZ DT NN VB JJ\n",
        encoding="utf-8",
    )
    assert main(["prepare", "--pairs", str(pairs), "--tags", str(tags), "--out", str(tmp_path / "out")]) == 0
    stats = json.loads((tmp_path / "out" / "mining_stats.json").read_text(encoding="utf-8"))
    assert stats["pairs"] == 3

    short = tmp_path / "short.tags"
    short.write_text("\n".join(tags.read_text(encoding="utf-8").splitlines()[:3]) + "\n", encoding="utf-8")
    assert main(["prepare", "--pairs", str(pairs), "--tags", str(short), "--out", str(tmp_path / "out2")]) == 2
