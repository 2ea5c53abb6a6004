from __future__ import annotations

import io
import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from canon import canon_json_line, derive_seeds, hash_canon, sha256_hex, status_line
from corpus import EOS_ID, SOS_ID, IdSequence, Triple, Vocabulary, build_vocabulary, encode, load_pretrained_embeddings
from evaluation import bleu, generate_for_triples
from losses import LossWeights, content_contrastive_loss, sentence_nll_from_logits, style_contrastive_loss, total_loss
from paraphrase_model import ModelDims, ParaphraseModel, build_model, inference, pad_batch
from runtime.metrics import TrainMetrics
from runtime.models import ConfigRecord, EpochRecord, StepRecord
from runtime.settings import TrainConfig, build_config
from runtime.versioning import run_meta

CHECKPOINT_SCHEMA = "egpg.checkpoint.v1"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    def __init__(self, msg: str, diagnostics: Dict[str, Any]):
        super().__init__(f"{msg}: {diagnostics}")
        self.diagnostics = diagnostics


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncodedTriple:
    source: IdSequence
    target: IdSequence
    exemplar: IdSequence


def encode_triples(triples: Sequence[Triple], vocab: Vocabulary) -> List[EncodedTriple]:
    return [EncodedTriple(encode(t.source, vocab), encode(t.target, vocab), encode(t.exemplar, vocab)) for t in triples]


@dataclass
class Batch:
    index: Tuple[int, ...]
    src: torch.Tensor
    src_len: torch.Tensor
    tgt: torch.Tensor
    tgt_len: torch.Tensor
    exm: torch.Tensor
    exm_len: torch.Tensor
    dec_input: torch.Tensor
    dec_target: torch.Tensor
    dec_mask: torch.Tensor

    def __len__(self) -> int:
        return len(self.index)

    def to(self, device: torch.device) -> "Batch":
        # lengths stay on the CPU for pack_padded_sequence
        moved = {
            k: v.to(device) if isinstance(v, torch.Tensor) and not k.endswith("_len") else v
            for k, v in self.__dict__.items()
        }
        return Batch(**moved)


def collate(items: Sequence[EncodedTriple], index: Sequence[int]) -> Batch:
    src, src_len = pad_batch([t.source for t in items])
    tgt, tgt_len = pad_batch([t.target for t in items])
    exm, exm_len = pad_batch([t.exemplar for t in items])
    # decoder reads SOS + Y and predicts Y + EOS
    dec_in, _ = pad_batch([(SOS_ID,) + t.target for t in items])
    dec_out, dec_len = pad_batch([t.target + (EOS_ID,) for t in items])
    T = dec_out.shape[1]
    mask = torch.arange(T)[None, :] < dec_len[:, None]
    return Batch(tuple(index), src, src_len, tgt, tgt_len, exm, exm_len, dec_in, dec_out, mask)


def batch_plan(n_items: int, n: int, seed: int, shuffle: bool = True) -> List[Tuple[int, ...]]:
    if n_items < 1:
        raise ValueError("dataset is empty")
    if n < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng(seed).permutation(n_items) if shuffle else np.arange(n_items)
    return [tuple(int(i) for i in order[lo : lo + n]) for lo in range(0, n_items, n)]


def make_batches(encoded: Sequence[EncodedTriple], n: int, seed: int, shuffle: bool = True) -> List[Batch]:
    return [collate([encoded[i] for i in idx], idx) for idx in batch_plan(len(encoded), n, seed, shuffle)]


_DONE = object()


def prefetch(make: Callable[[Any], Any], plan: Sequence[Any], depth: int) -> Iterator[Any]:
    """Run `make` over `plan` on a producer thread, yielding results in plan order."""
    if depth <= 0:
        for p in plan:
            yield make(p)
        return
    q: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def producer() -> None:
        try:
            for p in plan:
                if stop.is_set():
                    return
                q.put(make(p))
            q.put(_DONE)
        except BaseException as e:  # surfaced in the consumer
            q.put(e)

    t = threading.Thread(target=producer, name="egpg-prefetch", daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        # unblock a producer waiting on a full queue
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(timeout=0.05)


@dataclass(frozen=True)
class StepLosses:
    nll: float
    ccl: float
    scl: float
    total: float
    grad_norm: float = 0.0


def compute_losses(
    m: ParaphraseModel,
    batch: Batch,
    cfg: TrainConfig,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    c_x = m.content(batch.src, batch.src_len)
    c_y = m.content(batch.tgt, batch.tgt_len)
    s_z = m.style(batch.exm, batch.exm_len)
    s_y = m.style(batch.tgt, batch.tgt_len)
    logits = m.decode_logits(c_x, s_z, batch.dec_input, cfg.teacher_forcing_rate, generator)
    per_sentence = sentence_nll_from_logits(logits, batch.dec_target, batch.dec_mask)
    nll = per_sentence.mean() if cfg.batch_mean_loss else per_sentence.sum()
    ccl = content_contrastive_loss(c_x, c_y, cfg.tau, cfg.normalize_features, cfg.batch_mean_loss)
    scl = style_contrastive_loss(s_y, s_z, cfg.tau, cfg.normalize_features, cfg.batch_mean_loss)
    total = total_loss(nll, ccl, scl, LossWeights(cfg.lambda_ccl, cfg.lambda_scl))
    return total, {"nll": nll, "ccl": ccl, "scl": scl}


def make_optimizer(m: ParaphraseModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(m.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def train_step(
    batch: Batch,
    m: ParaphraseModel,
    opt: torch.optim.Optimizer,
    cfg: TrainConfig,
    generator: Optional[torch.Generator] = None,
) -> StepLosses:
    m.train()
    opt.zero_grad(set_to_none=True)
    total, parts = compute_losses(m, batch, cfg, generator)
    vals = {k: float(v.detach()) for k, v in parts.items()}
    vals["total"] = float(total.detach())
    if not all(math.isfinite(v) for v in vals.values()):
        raise NonFiniteLossError("non-finite loss", {**vals, "batch": list(batch.index)[:16], "batch_size": len(batch)})
    total.backward()
    if cfg.grad_clip > 0:
        gn = torch.nn.utils.clip_grad_norm_(m.parameters(), cfg.grad_clip)
    else:
        gn = torch.linalg.vector_norm(
            torch.stack([p.grad.detach().norm() for p in m.parameters() if p.grad is not None])
        )
    grad_norm = float(gn)
    if not math.isfinite(grad_norm):
        raise NonFiniteLossError("non-finite gradient norm", {**vals, "grad_norm": grad_norm})
    opt.step()
    return StepLosses(vals["nll"], vals["ccl"], vals["scl"], vals["total"], grad_norm)


def evaluate_batch_loss(m: ParaphraseModel, batch: Batch, cfg: TrainConfig) -> StepLosses:
    with inference(m):
        total, parts = compute_losses(m, batch, cfg.with_overrides(teacher_forcing_rate=1.0))
    return StepLosses(float(parts["nll"]), float(parts["ccl"]), float(parts["scl"]), float(total))


def evaluate_teacher_forced(m: ParaphraseModel, encoded: Sequence[EncodedTriple], batch_size: int = 64) -> Dict[str, float]:
    """Token accuracy (EOS included) and mean per-sentence NLL under gold decoder inputs."""
    if not encoded:
        raise ValueError("nothing to evaluate")
    dev = next(m.parameters()).device
    correct = tokens = 0
    nll_sum = 0.0
    with inference(m):
        for idx in batch_plan(len(encoded), batch_size, seed=0, shuffle=False):
            b = collate([encoded[i] for i in idx], idx).to(dev)
            c = m.content(b.src, b.src_len)
            s = m.style(b.exm, b.exm_len)
            logits = m.decode_logits(c, s, b.dec_input)
            pred = logits.argmax(-1)
            correct += int(((pred == b.dec_target) & b.dec_mask).sum())
            tokens += int(b.dec_mask.sum())
            nll_sum += float(sentence_nll_from_logits(logits, b.dec_target, b.dec_mask).sum())
    return {"token_accuracy": correct / tokens, "nll": nll_sum / len(encoded)}


@dataclass
class RunLog:
    records: List[Dict[str, Any]] = field(default_factory=list)
    path: Optional[Path] = None

    def append(self, rec) -> None:
        d = rec.model_dump() if hasattr(rec, "model_dump") else dict(rec)
        self.records.append(d)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(canon_json_line(d) + "\n")

    def steps(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r.get("event") == "step"]

    def epochs(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r.get("event") == "epoch"]

    def config(self) -> Optional[Dict[str, Any]]:
        for r in self.records:
            if r.get("event") == "config":
                return r
        return None

    def loss_trajectory(self) -> List[Tuple[float, float, float, float]]:
        return [(r["nll"], r["ccl"], r["scl"], r["total"]) for r in self.steps()]

    @staticmethod
    def load(path: Path) -> "RunLog":
        recs = [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        return RunLog(records=recs, path=None)


def model_dims(cfg: TrainConfig, vocab_size: int) -> ModelDims:
    return ModelDims(
        vocab_size=vocab_size,
        d_emb=cfg.d_emb,
        k_c=cfg.k_c,
        k_s=cfg.k_s,
        style_layers=cfg.style_layers,
        style_heads=cfg.style_heads,
        style_ff=cfg.style_ff,
        max_len=cfg.max_len,
        decoder_hidden=cfg.decoder_hidden,
        dropout=cfg.dropout,
    )


def init_model(cfg: TrainConfig, vocab: Vocabulary, embeddings: Optional[np.ndarray] = None) -> ParaphraseModel:
    torch.manual_seed(derive_seeds(cfg.seed, 0)["init"])
    m = build_model(model_dims(cfg, len(vocab)))
    if embeddings is not None:
        m.load_embeddings(embeddings)
    return m


def tensor_digests(m: torch.nn.Module) -> Dict[str, str]:
    out = {}
    for name, t in sorted(m.state_dict().items()):
        arr = t.detach().cpu().contiguous().numpy()
        out[name] = sha256_hex(str(arr.dtype).encode() + str(arr.shape).encode() + arr.tobytes())
    return out


def checkpoint_digest(m: ParaphraseModel, vocab: Vocabulary, cfg: TrainConfig) -> str:
    return hash_canon({"config": cfg.model_dump(), "vocab_hash": vocab.digest(), "tensors": tensor_digests(m)})


def save_checkpoint(
    m: ParaphraseModel,
    cfg: TrainConfig,
    vocab: Vocabulary,
    path: Path,
    opt: Optional[torch.optim.Optimizer] = None,
    progress: Optional[Dict[str, Any]] = None,
) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = checkpoint_digest(m, vocab, cfg)
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "config": cfg.model_dump(),
        "dims": m.dims.as_dict(),
        "vocab": list(vocab.id_to_token),
        "vocab_hash": vocab.digest(),
        "state_dict": m.state_dict(),
        "digest": digest,
        "progress": dict(progress or {}),
    }
    if opt is not None:
        payload["optimizer"] = opt.state_dict()
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    path.with_name(path.stem + ".sha256").write_text(digest + "\n", encoding="utf-8")
    return digest


@dataclass
class LoadedCheckpoint:
    model: ParaphraseModel
    config: TrainConfig
    vocab: Vocabulary
    digest: str
    progress: Dict[str, Any]
    optimizer_state: Optional[Dict[str, Any]]


def load_checkpoint(path: Path, expected_vocab: Optional[Vocabulary] = None) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_SCHEMA} file")
    vocab = Vocabulary(tuple(payload["vocab"]))
    if vocab.digest() != payload["vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch inside checkpoint")
    if expected_vocab is not None and expected_vocab.digest() != vocab.digest():
        raise CheckpointError("checkpoint vocabulary does not match the supplied vocabulary")
    cfg = build_config(payload["config"])
    m = build_model(ModelDims(**payload["dims"]))
    try:
        m.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"parameter shape mismatch: {e}") from e
    if checkpoint_digest(m, vocab, cfg) != payload["digest"]:
        raise CheckpointError("checkpoint digest mismatch")
    m.eval()
    return LoadedCheckpoint(m, cfg, vocab, payload["digest"], dict(payload.get("progress", {})), payload.get("optimizer"))


@dataclass
class FitResult:
    model: ParaphraseModel
    vocab: Vocabulary
    runlog: RunLog
    best_bleu: float
    steps: int
    digest: str = ""


def _set_determinism(on: bool) -> None:
    torch.use_deterministic_algorithms(on, warn_only=True)


def validation_metrics(
    m: ParaphraseModel,
    vocab: Vocabulary,
    triples: Sequence[Triple],
    encoded: Sequence[EncodedTriple],
    cfg: TrainConfig,
) -> Dict[str, float]:
    gen = generate_for_triples(m, vocab, triples, cfg.max_len)
    tf = evaluate_teacher_forced(m, encoded, cfg.batch_size)
    return {
        "bleu": bleu(gen, [t.target.tokens for t in triples]),
        "token_accuracy": tf["token_accuracy"],
        "nll": tf["nll"],
    }


def fit(
    train: Sequence[Triple],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    valid: Optional[Sequence[Triple]] = None,
    vocab: Optional[Vocabulary] = None,
    resume: bool = False,
    write_metrics: bool = True,
) -> FitResult:
    """Train for cfg.epochs; with `out_dir`, write runlog.jsonl, last.pt, best.pt and metrics.prom.

    Without a validation split the training triples are scored each epoch. Every epoch
    reseeds shuffle and dropout from (seed, epoch), so a resumed run continues exactly.
    """
    if not train:
        raise ValueError("training set is empty")
    _set_determinism(cfg.deterministic)
    valid = list(valid) if valid else list(train)
    out = Path(out_dir) if out_dir is not None else None
    last_path = out / "last.pt" if out else None
    best_path = out / "best.pt" if out else None

    start_epoch, step, best_bleu = 1, 0, -1.0
    opt_state = None
    if resume and last_path is not None and last_path.exists():
        ck = load_checkpoint(last_path, expected_vocab=vocab)
        if ck.config.model_dump(exclude={"epochs"}) != cfg.model_dump(exclude={"epochs"}):
            raise CheckpointError("resume config differs from the checkpoint config")
        m, vocab = ck.model, ck.vocab
        start_epoch = int(ck.progress.get("epoch", 0)) + 1
        step = int(ck.progress.get("step", 0))
        best_bleu = float(ck.progress.get("best_bleu", -1.0))
        opt_state = ck.optimizer_state
        status_line("PASS_RESUME", path=last_path, epoch=start_epoch - 1, step=step)
    else:
        if vocab is None:
            vocab = build_vocabulary(
                [s for t in train for s in (t.source, t.target, t.exemplar)], min_freq=cfg.min_freq
            )
        emb = None
        if cfg.embeddings_path:
            emb, _ = load_pretrained_embeddings(Path(cfg.embeddings_path), vocab, cfg.d_emb, seed=cfg.seed)
        m = init_model(cfg, vocab, emb)

    opt = make_optimizer(m, cfg)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    enc_train = encode_triples(train, vocab)
    enc_valid = encode_triples(valid, vocab)

    runlog = RunLog()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "runlog.jsonl"
        if start_epoch > 1 and log_path.exists():
            # drop events past the checkpointed epoch (an interrupted epoch is replayed)
            kept = [r for r in RunLog.load(log_path).records if int(r.get("epoch", 0)) < start_epoch]
            log_path.write_text("".join(canon_json_line(r) + "\n" for r in kept), encoding="utf-8")
            runlog.records = kept
        elif log_path.exists():
            log_path.unlink()
        runlog.path = log_path
    if start_epoch == 1:
        runlog.append(
            ConfigRecord(
                config=cfg.model_dump(),
                vocab_size=len(vocab),
                vocab_hash=vocab.digest(),
                train_items=len(train),
                valid_items=len(valid),
                meta=run_meta().as_dict(),
                notes={
                    "features": "l2-normalized before dot product" if cfg.normalize_features else "raw dot product",
                    "reduction": "batch mean" if cfg.batch_mean_loss else "sum over batch",
                },
            )
        )
    metrics = TrainMetrics()
    dev = next(m.parameters()).device

    for epoch in range(start_epoch, cfg.epochs + 1):
        seeds = derive_seeds(cfg.seed, epoch)
        torch.manual_seed(seeds["dropout"])
        gen = torch.Generator().manual_seed(seeds["sampling"])
        plan = batch_plan(len(enc_train), cfg.batch_size, seeds["shuffle"], shuffle=True)
        t_epoch = time.perf_counter()
        epoch_total = 0.0
        for b in prefetch(lambda idx: collate([enc_train[i] for i in idx], idx), plan, cfg.prefetch_batches):
            t0 = time.perf_counter()
            step += 1
            try:
                sl = train_step(b.to(dev), m, opt, cfg, gen)
            except NonFiniteLossError as e:
                e.diagnostics.update({"epoch": epoch, "step": step})
                status_line("FAIL_TRAIN_STEP", epoch=epoch, step=step, reason=str(e).split(":")[0])
                raise
            dt = time.perf_counter() - t0
            epoch_total += sl.total
            runlog.append(StepRecord(epoch=epoch, step=step, nll=sl.nll, ccl=sl.ccl, scl=sl.scl, total=sl.total, grad_norm=sl.grad_norm, seconds=dt))
            metrics.observe_step(sl.nll, sl.ccl, sl.scl, sl.total, dt)

        vm = validation_metrics(m, vocab, valid, enc_valid, cfg)
        is_best = vm["bleu"] > best_bleu
        if is_best:
            best_bleu = vm["bleu"]
            if best_path is not None:
                save_checkpoint(m, cfg, vocab, best_path, progress={"epoch": epoch, "step": step, "best_bleu": best_bleu})
        runlog.append(
            EpochRecord(
                epoch=epoch,
                step=step,
                train_total=epoch_total,
                valid_bleu=vm["bleu"],
                valid_token_accuracy=vm["token_accuracy"],
                valid_nll=vm["nll"],
                best=is_best,
                seconds=time.perf_counter() - t_epoch,
            )
        )
        metrics.observe_epoch(vm["bleu"])
        status_line("PASS_EPOCH", epoch=epoch, step=step, total=epoch_total, valid_bleu=vm["bleu"], best=is_best)
        if last_path is not None:
            save_checkpoint(m, cfg, vocab, last_path, opt, progress={"epoch": epoch, "step": step, "best_bleu": best_bleu})

    if out is not None and write_metrics and metrics.enabled:
        metrics.write(out / "metrics.prom")
    digest = checkpoint_digest(m, vocab, cfg)
    status_line("PASS_FIT", epochs=cfg.epochs, steps=step, best_bleu=best_bleu, digest=digest[:16])
    return FitResult(model=m, vocab=vocab, runlog=runlog, best_bleu=best_bleu, steps=step, digest=digest)
