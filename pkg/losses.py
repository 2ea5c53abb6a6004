from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12
DEFAULT_TAU = 0.5

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda_ccl: float = 0.1
    lambda_scl: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda_ccl", "lambda_scl"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def nll_loss(probs: Union[torch.Tensor, Sequence[Sequence[float]]], target: Sequence[int], eps: float = PROB_FLOOR) -> torch.Tensor:
    """Mean negative log probability of the gold tokens, floored at `eps`."""
    p = probs if isinstance(probs, torch.Tensor) else torch.tensor(probs, dtype=torch.float64)
    if p.dim() != 2:
        raise ValueError("probs must be a (steps, vocab) matrix")
    if p.shape[0] != len(target):
        raise ValueError(f"{p.shape[0]} distributions for {len(target)} target tokens")
    if len(target) == 0:
        raise ValueError("empty target")
    idx = torch.as_tensor(list(target), dtype=torch.long, device=p.device)
    gold = p.gather(1, idx[:, None])[:, 0]
    return -torch.log(gold.clamp_min(eps)).mean()


def sentence_nll_from_logits(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-sentence mean token NLL, shape (B,); masked positions are excluded from sum and length."""
    B, T, V = logits.shape
    tok = F.cross_entropy(logits.reshape(B * T, V), targets.reshape(B * T), reduction="none").reshape(B, T)
    m = mask.to(tok.dtype)
    return (tok * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)


def infonce_bidirectional(
    a: torch.Tensor,
    b: torch.Tensor,
    tau: float = DEFAULT_TAU,
    normalize: bool = True,
    batch_mean: bool = False,
) -> torch.Tensor:
    """Sum over all 2n anchors of -log softmax of the positive among the other 2n-1 vectors.

    Row i of `a` and row i of `b` are positives; every other row of either side is a
    negative. The anchor's self-similarity is masked out of its denominator.
    """
    if a.dim() != 2 or a.shape != b.shape:
        raise ValueError(f"anchors must be equal (n, d) matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    n = a.shape[0]
    if n < 1:
        raise ValueError("contrastive batch is empty")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    z = torch.cat([a, b], dim=0)
    if normalize:
        z = F.normalize(z, dim=-1)
    sim = (z @ z.T) / tau
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    positives = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    # cross_entropy subtracts the row max before exponentiating
    loss = F.cross_entropy(sim, positives, reduction="sum")
    if batch_mean:
        loss = loss / n
    return loss


def content_contrastive_loss(
    c_x: torch.Tensor, c_y: torch.Tensor, tau: float = DEFAULT_TAU, normalize: bool = True, batch_mean: bool = False
) -> torch.Tensor:
    return infonce_bidirectional(c_x, c_y, tau=tau, normalize=normalize, batch_mean=batch_mean)


def style_contrastive_loss(
    s_y: torch.Tensor, s_z: torch.Tensor, tau: float = DEFAULT_TAU, normalize: bool = True, batch_mean: bool = False
) -> torch.Tensor:
    return infonce_bidirectional(s_y, s_z, tau=tau, normalize=normalize, batch_mean=batch_mean)


def total_loss(nll_sum: Number, ccl: Number, scl: Number, w: LossWeights) -> Number:
    return nll_sum + w.lambda_ccl * ccl + w.lambda_scl * scl
