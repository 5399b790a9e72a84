"""Pairwise embedding losses over within-batch similarities.

Both losses consume a :class:`PairSet`: one similarity per unordered pair of
batch items plus a matching/non-matching label derived from person ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .network import cosine_matrix
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class PairLabels:
    rows: np.ndarray
    cols: np.ndarray
    matching: np.ndarray

    @property
    def n_matching(self) -> int:
        return int(self.matching.sum())

    @property
    def n_nonmatching(self) -> int:
        return int((~self.matching).sum())


def pair_labels(person_ids) -> PairLabels:
    """Pairs ``(i, j)`` with ``i < j`` in row-major order; matching iff ids agree."""
    ids = np.asarray(person_ids)
    if ids.ndim != 1 or ids.size < 2:
        raise ContractError(f"need at least two items to form pairs, got {ids.size}")
    rows, cols = np.triu_indices(ids.size, k=1)
    return PairLabels(rows, cols, ids[rows] == ids[cols])


@dataclass(frozen=True)
class PairSet:
    sims: Tensor
    matching: np.ndarray

    def __post_init__(self):
        if self.sims.shape != self.matching.shape or self.sims.ndim != 1:
            raise DimensionError(f"similarities {self.sims.shape} and labels {self.matching.shape} differ")

    def check(self) -> None:
        if not self.matching.any():
            raise ContractError("no matching pairs in the batch; the loss is undefined")
        if self.matching.all():
            raise ContractError("no non-matching pairs in the batch; the loss is undefined")
        s = self.sims.data
        if s.min() < -1.0 or s.max() > 1.0:
            raise ContractError("similarities must lie in [-1, 1]")


def gather_pairs(sim_matrix: Tensor, labels: PairLabels) -> Tensor:
    rows, cols = labels.rows, labels.cols
    shape = sim_matrix.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return Tensor._from_op(sim_matrix.data[rows, cols], (sim_matrix,), back, "gather_pairs")


def pairs_from_embeddings(emb: Tensor, person_ids) -> PairSet:
    """Cosine similarities of all distinct pairs of rows of ``emb``."""
    if emb.shape[0] != np.asarray(person_ids).size:
        raise DimensionError(f"{emb.shape[0]} embeddings but {np.asarray(person_ids).size} ids")
    labels = pair_labels(person_ids)
    return PairSet(gather_pairs(cosine_matrix(emb), labels), labels.matching)


@dataclass(frozen=True)
class HistogramSpec:
    """``n_bins`` evenly spaced nodes on [-1, 1]."""

    n_bins: int = 100

    def __post_init__(self):
        if self.n_bins < 2:
            raise ContractError(f"need at least 2 histogram nodes, got {self.n_bins}")

    @property
    def step(self) -> float:
        return 2.0 / (self.n_bins - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_bins)


def soft_histogram(s: np.ndarray, spec: HistogramSpec) -> tuple[np.ndarray, np.ndarray]:
    """Triangular-kernel bin weights ``P x n_bins`` and their derivative in ``s``."""
    diff = s[:, None] - spec.nodes[None, :]
    delta = spec.step
    w = np.maximum(0.0, 1.0 - np.abs(diff) / delta)
    dw = np.where(np.abs(diff) < delta, -np.sign(diff) / delta, 0.0)
    return w, dw


def histogram_loss(pairs: PairSet, spec: HistogramSpec | None = None) -> Tensor:
    """Probability, under soft histograms, that a non-matching pair is at least
    as similar as a matching one: ``sum_r h-[r] * cumsum(h+)[r]``."""
    spec = spec or HistogramSpec()
    pairs.check()
    s = pairs.sims.data
    pos = pairs.matching
    neg = ~pos
    w, dw = soft_histogram(s, spec)
    n_pos, n_neg = pos.sum(), neg.sum()
    h_pos = w[pos].sum(axis=0) / n_pos
    h_neg = w[neg].sum(axis=0) / n_neg
    cdf_pos = np.cumsum(h_pos)
    loss = float(np.dot(h_neg, cdf_pos))

    def back(g):
        d_hneg = cdf_pos
        d_hpos = np.cumsum(h_neg[::-1])[::-1]
        gs = np.empty_like(s)
        gs[pos] = dw[pos] @ d_hpos / n_pos
        gs[neg] = dw[neg] @ d_hneg / n_neg
        return (g * gs,)

    return Tensor._from_op(np.array(loss), (pairs.sims,), back, "histogram_loss")


@dataclass(frozen=True)
class DevianceParams:
    alpha: float = 2.0
    beta: float = 0.5
    neg_cost: float = 10.0


def deviance_terms(s: np.ndarray, matching: np.ndarray, params: DevianceParams) -> np.ndarray:
    """Per-pair ``log(1 + exp(-alpha (s - beta) m c))``."""
    mc = np.where(matching, 1.0, -params.neg_cost)
    return np.logaddexp(0.0, -params.alpha * (s - params.beta) * mc)


def binomial_deviance(pairs: PairSet, params: DevianceParams | None = None) -> Tensor:
    """Class-balanced binomial deviance: half the mean matching-pair term plus
    half the mean non-matching-pair term."""
    params = params or DevianceParams()
    pairs.check()
    s = pairs.sims.data
    pos = pairs.matching
    mc = np.where(pos, 1.0, -params.neg_cost)
    z = -params.alpha * (s - params.beta) * mc
    terms = np.logaddexp(0.0, z)
    weight = np.where(pos, 0.5 / pos.sum(), 0.5 / (~pos).sum())
    loss = float(np.sum(weight * terms))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def back(g):
        return (g * weight * sig * (-params.alpha * mc),)

    return Tensor._from_op(np.array(loss), (pairs.sims,), back, "binomial_deviance")


def make_loss(name: str, n_bins: int = 100, deviance: DevianceParams | None = None):
    """Return ``pairs -> scalar Tensor`` for ``'histogram'`` or ``'binomial'``."""
    if name == "histogram":
        spec = HistogramSpec(n_bins)
        return lambda pairs: histogram_loss(pairs, spec)
    if name == "binomial":
        dp = deviance or DevianceParams()
        return lambda pairs: binomial_deviance(pairs, dp)
    raise ContractError(f"unknown loss {name!r}")


def pairset(sims, matching) -> PairSet:
    """Build a PairSet from raw arrays (tests and tooling)."""
    return PairSet(as_tensor(sims), np.asarray(matching, dtype=bool))
