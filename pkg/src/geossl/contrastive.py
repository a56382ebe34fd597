"""NT-Xent contrastive loss: reference float64 implementation and a torch twin.

Row convention for a batch of ``N`` source images: view one of image ``n`` is
row ``n`` and view two is row ``n + N``, so row ``i`` is paired with
``(i + N) mod 2N``.

The numpy functions are the reference used for verification (exact loss,
analytic gradient). :func:`nt_xent_torch` is what the training loop calls;
it computes the same quantity with autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateEmbedding, InvalidArgument, InvalidTemperature

DEFAULT_TAU = 0.5

# "mean": divide the sum of the 2N ordered positive-pair terms by 2N.
# "strict": divide the same sum by N (literal 1/N prefactor; twice "mean").
NORMALIZATIONS = ("mean", "strict")


@dataclass(frozen=True)
class ProjectionBatch:
    Z: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.float64)
        if Z.ndim != 2:
            raise InvalidArgument("Z must be a 2-D matrix")
        if Z.shape[0] < 2 or Z.shape[0] % 2:
            raise InvalidArgument(f"Z must have 2N >= 2 rows, got {Z.shape[0]}")
        if Z.shape[1] < 2:
            raise InvalidArgument("projection dimension must be >= 2")
        _check_tau(self.tau)
        object.__setattr__(self, "Z", Z)

    @property
    def N(self) -> int:
        return self.Z.shape[0] // 2

    def partner(self, i: int) -> int:
        return (i + self.N) % (2 * self.N)


@dataclass(frozen=True)
class LossValue:
    value: float
    per_pair: list[float] = field(default_factory=list)


def _check_tau(tau: float) -> None:
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidTemperature(f"temperature must be positive, got {tau}")


def _row_norms(Z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(Z, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateEmbedding(int(zero[0]))
    return norms


def cosine_similarity_matrix(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    U = Z / _row_norms(Z)[:, None]
    S = U @ U.T
    return (S + S.T) / 2


def _row_log_denominators(S: np.ndarray, tau: float) -> np.ndarray:
    """log sum_{k != i} exp(S[i, k] / tau) for every row, max-shifted."""
    logits = S / tau
    np.fill_diagonal(logits, -np.inf)
    m = logits.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]


def nt_xent_pair_loss(S, i: int, j: int, tau: float = DEFAULT_TAU) -> float:
    """-log(exp(S[i,j]/tau) / sum_{k != i} exp(S[i,k]/tau)).

    Works on any similarity matrix, so callers can perturb ``S`` directly.
    """
    _check_tau(tau)
    S = np.asarray(S, dtype=np.float64)
    if i == j:
        raise InvalidArgument("a positive pair needs two distinct rows")
    row = S[i] / tau
    others = np.delete(row, i)
    m = others.max()
    log_den = m + np.log(np.exp(others - m).sum())
    return float(log_den - row[j])


def nt_xent_from_similarity(S, tau: float = DEFAULT_TAU, normalization: str = "mean") -> LossValue:
    S = np.asarray(S, dtype=np.float64)
    two_n = S.shape[0]
    n = two_n // 2
    _check_tau(tau)
    partners = (np.arange(two_n) + n) % two_n
    per = _row_log_denominators(S, tau) - S[np.arange(two_n), partners] / tau
    total = float(per.sum())
    if normalization == "mean":
        value = total / two_n
    elif normalization == "strict":
        value = total / n
    else:
        raise InvalidArgument(f"unknown normalization {normalization!r}")
    return LossValue(value=max(value, 0.0), per_pair=[float(x) for x in per])


def nt_xent_batch_loss(batch: ProjectionBatch, normalization: str = "mean") -> LossValue:
    S = cosine_similarity_matrix(batch.Z)
    return nt_xent_from_similarity(S, batch.tau, normalization)


def nt_xent_gradient(batch: ProjectionBatch, normalization: str = "mean") -> np.ndarray:
    """Analytic dL/dZ for :func:`nt_xent_batch_loss`."""
    Z = batch.Z
    tau = batch.tau
    two_n = Z.shape[0]
    n = two_n // 2
    norms = _row_norms(Z)
    U = Z / norms[:, None]
    S = U @ U.T

    logits = S / tau
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(two_n), (np.arange(two_n) + n) % two_n] -= 1.0

    scale = two_n if normalization == "mean" else n
    G = P / (tau * scale)  # dL/dS, not symmetric
    dU = (G + G.T) @ U
    # project out the radial component, then undo the normalisation
    dU -= np.sum(dU * U, axis=1, keepdims=True) * U
    return dU / norms[:, None]


def nt_xent_torch(z: torch.Tensor, tau: float = DEFAULT_TAU, normalization: str = "mean") -> torch.Tensor:
    """Batch NT-Xent on a ``2N x D`` tensor of projections (autograd-friendly)."""
    _check_tau(tau)
    two_n = z.shape[0]
    if two_n < 2 or two_n % 2:
        raise InvalidArgument(f"expected 2N rows, got {two_n}")
    n = two_n // 2
    u = torch.nn.functional.normalize(z, dim=1)
    logits = (u @ u.T) / tau
    self_mask = torch.eye(two_n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = (torch.arange(two_n, device=z.device) + n) % two_n
    total = torch.nn.functional.cross_entropy(logits, targets, reduction="sum")
    return total / (two_n if normalization == "mean" else n)
