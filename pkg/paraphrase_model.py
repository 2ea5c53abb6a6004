from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from corpus import EOS_ID, PAD_ID, SOS_ID


class ModelInputError(ValueError):
    pass


class EmptySequenceError(ModelInputError):
    pass


class FeatureDimensionError(ModelInputError):
    pass


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    d_emb: int = 300
    k_c: int = 512
    k_s: int = 768
    style_layers: int = 4
    style_heads: int = 8
    style_ff: int = 3072
    max_len: int = 15
    decoder_hidden: Optional[int] = None
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.k_s % self.style_heads != 0:
            raise ValueError(f"k_s={self.k_s} is not divisible by style_heads={self.style_heads}")
        if self.vocab_size <= EOS_ID:
            raise ValueError("vocabulary too small")

    @property
    def hidden(self) -> int:
        return self.decoder_hidden if self.decoder_hidden else self.k_c + self.k_s

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ContentEncoder(nn.Module):
    """Unidirectional GRU; the feature is the state at the last non-PAD position."""

    def __init__(self, d_emb: int, k_c: int) -> None:
        super().__init__()
        self.rnn = nn.GRU(d_emb, k_c, batch_first=True)

    def forward(self, emb: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h_n = self.rnn(packed)
        return h_n[-1]


class StyleEncoder(nn.Module):
    """Small BERT-style encoder trained from scratch, pooled at a prepended [CLS] slot."""

    def __init__(self, d_emb: int, k_s: int, layers: int, heads: int, ff: int, max_len: int, dropout: float) -> None:
        super().__init__()
        self.max_len = max_len
        self.in_proj = nn.Linear(d_emb, k_s)
        self.cls = nn.Parameter(torch.empty(1, 1, k_s))
        nn.init.normal_(self.cls, std=0.02)
        self.pos = nn.Embedding(max_len + 1, k_s)
        self.norm = nn.LayerNorm(k_s)
        self.drop = nn.Dropout(dropout)
        layer = nn.TransformerEncoderLayer(
            d_model=k_s,
            nhead=heads,
            dim_feedforward=ff,
            dropout=dropout,
            activation="gelu",
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.pooler = nn.Linear(k_s, k_s)

    def forward(self, emb: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        B, T, _ = emb.shape
        if T > self.max_len:
            raise ModelInputError(f"sequence length {T} exceeds max_len {self.max_len}")
        x = torch.cat([self.cls.expand(B, -1, -1), self.in_proj(emb)], dim=1)
        positions = torch.arange(T + 1, device=emb.device)
        x = self.drop(self.norm(x + self.pos(positions)[None, :, :]))
        # slot 0 is [CLS]; tokens occupy 1..length
        pad_mask = positions[None, :] > lengths.to(emb.device)[:, None]
        out = self.encoder(x, src_key_padding_mask=pad_mask)
        return torch.tanh(self.pooler(out[:, 0]))


class ParaphraseModel(nn.Module):
    def __init__(self, dims: ModelDims) -> None:
        super().__init__()
        self.dims = dims
        self.embedding = nn.Embedding(dims.vocab_size, dims.d_emb, padding_idx=PAD_ID)
        self.content_encoder = ContentEncoder(dims.d_emb, dims.k_c)
        self.style_encoder = StyleEncoder(
            dims.d_emb, dims.k_s, dims.style_layers, dims.style_heads, dims.style_ff, dims.max_len, dims.dropout
        )
        if dims.decoder_hidden:
            self.bridge: nn.Module = nn.Linear(dims.k_c + dims.k_s, dims.decoder_hidden)
        else:
            self.bridge = nn.Identity()
        self.decoder = nn.GRU(dims.d_emb, dims.hidden, batch_first=True)
        self.out_proj = nn.Linear(dims.hidden, dims.vocab_size, bias=False)

    def load_embeddings(self, matrix: np.ndarray) -> None:
        if tuple(matrix.shape) != (self.dims.vocab_size, self.dims.d_emb):
            raise FeatureDimensionError(f"embedding matrix shape {matrix.shape} does not match the model")
        with torch.no_grad():
            self.embedding.weight.copy_(torch.from_numpy(np.ascontiguousarray(matrix, dtype=np.float32)))

    def content(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(self.embedding(ids), lengths)

    def style(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(self.embedding(ids), lengths)

    def initial_hidden(self, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.dims.k_c or s.shape[-1] != self.dims.k_s:
            raise FeatureDimensionError(
                f"features ({c.shape[-1]}, {s.shape[-1]}) do not match model dims ({self.dims.k_c}, {self.dims.k_s})"
            )
        return self.bridge(torch.cat([c, s], dim=-1))

    def step(self, inp: torch.Tensor, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        # inp: (B,), h: (1, B, H)
        out, h = self.decoder(self.embedding(inp)[:, None, :], h)
        return self.out_proj(out[:, 0]), h

    def decode_logits(
        self,
        c: torch.Tensor,
        s: torch.Tensor,
        dec_inputs: torch.Tensor,
        teacher_forcing_rate: float = 1.0,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        h0 = self.initial_hidden(c, s)[None, :, :].contiguous()
        if teacher_forcing_rate >= 1.0:
            out, _ = self.decoder(self.embedding(dec_inputs), h0)
            return self.out_proj(out)
        B, T = dec_inputs.shape
        h = h0
        inp = dec_inputs[:, 0]
        steps = []
        for t in range(T):
            logits, h = self.step(inp, h)
            steps.append(logits)
            if t + 1 < T:
                gold = dec_inputs[:, t + 1]
                use_gold = torch.rand(B, generator=generator, device=gold.device) < teacher_forcing_rate
                inp = torch.where(use_gold, gold, logits.argmax(-1).detach())
        return torch.stack(steps, dim=1)


def build_model(dims: ModelDims) -> ParaphraseModel:
    return ParaphraseModel(dims)


@contextmanager
def inference(m: nn.Module) -> Iterator[None]:
    was_training = m.training
    m.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        m.train(was_training)


def _device(m: nn.Module) -> torch.device:
    return next(m.parameters()).device


def _single(ids: Sequence[int], m: nn.Module) -> Tuple[torch.Tensor, torch.Tensor]:
    if len(ids) == 0:
        raise EmptySequenceError("cannot encode an empty id sequence")
    dev = _device(m)
    t = torch.tensor([list(ids)], dtype=torch.long, device=dev)
    return t, torch.tensor([len(ids)], dtype=torch.long)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> Tuple[torch.Tensor, torch.Tensor]:
    if any(len(s) == 0 for s in seqs):
        raise EmptySequenceError("cannot encode an empty id sequence")
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return out, torch.tensor([len(s) for s in seqs], dtype=torch.long)


def encode_content(ids: Sequence[int], m: ParaphraseModel) -> torch.Tensor:
    t, lengths = _single(ids, m)
    with inference(m):
        return m.content(t, lengths)[0]


def encode_style(ids: Sequence[int], m: ParaphraseModel) -> torch.Tensor:
    t, lengths = _single(ids, m)
    with inference(m):
        return m.style(t, lengths)[0]


def encode_content_batch(seqs: Sequence[Sequence[int]], m: ParaphraseModel, batch_size: int = 256) -> torch.Tensor:
    return _encode_batched(seqs, m, m.content, batch_size)


def encode_style_batch(seqs: Sequence[Sequence[int]], m: ParaphraseModel, batch_size: int = 256) -> torch.Tensor:
    return _encode_batched(seqs, m, m.style, batch_size)


def _encode_batched(seqs, m: ParaphraseModel, fn, batch_size: int) -> torch.Tensor:
    dev = _device(m)
    outs = []
    with inference(m):
        for i in range(0, len(seqs), batch_size):
            ids, lengths = pad_batch(seqs[i : i + batch_size])
            outs.append(fn(ids.to(dev), lengths).cpu())
    return torch.cat(outs, dim=0)


def decode_teacher_forced(
    c: torch.Tensor, s: torch.Tensor, target: Sequence[int], m: ParaphraseModel
) -> torch.Tensor:
    """Per-step distributions p_t for a gold target (which must end with EOS); shape (|target|, |V|)."""
    if len(target) == 0 or int(target[-1]) != EOS_ID:
        raise ModelInputError("target must end with EOS")
    dev = _device(m)
    dec_in = torch.tensor([[SOS_ID] + [int(x) for x in target[:-1]]], dtype=torch.long, device=dev)
    with inference(m):
        logits = m.decode_logits(c.to(dev)[None, :], s.to(dev)[None, :], dec_in)
        return F.softmax(logits[0], dim=-1)


def generate_with_trace(
    c: torch.Tensor, s: torch.Tensor, m: ParaphraseModel, max_len: int
) -> Tuple[Tuple[int, ...], List[torch.Tensor]]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    dev = _device(m)
    out: List[int] = []
    trace: List[torch.Tensor] = []
    with inference(m):
        h = m.initial_hidden(c.to(dev)[None, :], s.to(dev)[None, :])[None, :, :].contiguous()
        inp = torch.tensor([SOS_ID], dtype=torch.long, device=dev)
        for _ in range(max_len):
            logits, h = m.step(inp, h)
            trace.append(F.softmax(logits[0], dim=-1))
            nxt = int(torch.argmax(logits[0]).item())
            if nxt == EOS_ID:
                break
            out.append(nxt)
            inp = torch.tensor([nxt], dtype=torch.long, device=dev)
    return tuple(out), trace


def generate(
    c: torch.Tensor, s: torch.Tensor, m: ParaphraseModel, max_len: int, beam_width: int = 1
) -> Tuple[int, ...]:
    """Greedy decoding from SOS (beam search when beam_width > 1); EOS is not returned."""
    if beam_width > 1:
        return beam_search(c, s, m, max_len, beam_width)
    ids, _ = generate_with_trace(c, s, m, max_len)
    return ids


def generate_batch(c: torch.Tensor, s: torch.Tensor, m: ParaphraseModel, max_len: int) -> List[Tuple[int, ...]]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    dev = _device(m)
    B = c.shape[0]
    outs: List[List[int]] = [[] for _ in range(B)]
    done = [False] * B
    with inference(m):
        h = m.initial_hidden(c.to(dev), s.to(dev))[None, :, :].contiguous()
        inp = torch.full((B,), SOS_ID, dtype=torch.long, device=dev)
        for _ in range(max_len):
            logits, h = m.step(inp, h)
            nxt = torch.argmax(logits, dim=-1)
            for b, tok in enumerate(nxt.tolist()):
                if done[b]:
                    continue
                if tok == EOS_ID:
                    done[b] = True
                else:
                    outs[b].append(tok)
            if all(done):
                break
            inp = nxt
    return [tuple(o) for o in outs]


def beam_search(
    c: torch.Tensor, s: torch.Tensor, m: ParaphraseModel, max_len: int, beam_width: int = 3
) -> Tuple[int, ...]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    dev = _device(m)
    with inference(m):
        h0 = m.initial_hidden(c.to(dev)[None, :], s.to(dev)[None, :])[None, :, :].contiguous()
        # (score, ids, hidden, finished)
        beams: List[Tuple[float, Tuple[int, ...], torch.Tensor, bool]] = [(0.0, (), h0, False)]
        for _ in range(max_len):
            if all(b[3] for b in beams):
                break
            cands: List[Tuple[float, Tuple[int, ...], torch.Tensor, bool]] = []
            for score, ids, h, finished in beams:
                if finished:
                    cands.append((score, ids, h, True))
                    continue
                last = ids[-1] if ids else SOS_ID
                logits, h2 = m.step(torch.tensor([last], dtype=torch.long, device=dev), h)
                logp = F.log_softmax(logits[0], dim=-1)
                top_v, top_i = torch.topk(logp, k=min(beam_width, logp.shape[0]))
                for v, i in zip(top_v.tolist(), top_i.tolist()):
                    if i == EOS_ID:
                        cands.append((score + v, ids, h2, True))
                    else:
                        cands.append((score + v, ids + (i,), h2, False))
            cands.sort(key=lambda b: (-b[0], b[1]))
            beams = cands[:beam_width]
    return beams[0][1]
