"""Collapsed backlog chain of a CBS reservation and its QBD structure.

State 0 collects every backlog ``v <= N*Q_s``; state ``i >= 1`` is the
backlog ``N*Q_s + i*delta``.  The transition matrix is fully described by
the scalar row ``a_0..a_n`` (recursive rows, ``a_0`` sitting ``H`` columns
left of the diagonal) plus the boundary column ``b``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from cbsprob.distributions import PMF

_SUM_TOL = 1e-12


class DivergentReservationError(ValueError):
    """The minimum demand per task period exceeds the supplied budget."""


class Classification(str, enum.Enum):
    POSITIVE_RECURRENT = "PositiveRecurrent"
    TRANSIENT_OR_NULL = "TransientOrNull"


@dataclass(frozen=True)
class ReservationParams:
    """Task period ``T``, server period ``T_s``, budget ``Q_s`` and resampling step (all µs)."""

    task_period: int
    server_period: int
    budget: int
    delta: int

    def __post_init__(self):
        if self.task_period <= 0 or self.server_period <= 0:
            raise ValueError("periods must be positive")
        if self.task_period % self.server_period:
            raise ValueError("server_period must divide period")
        if not 0 < self.budget <= self.server_period:
            raise ValueError("budget must satisfy 0 < Q_s <= T_s")
        if self.delta < 1 or self.budget % self.delta:
            raise ValueError("delta must be >= 1 and divide the budget")

    @property
    def n_periods(self) -> int:
        """``N = T / T_s``."""
        return self.task_period // self.server_period

    @property
    def bandwidth(self) -> float:
        return self.budget / self.server_period

    @property
    def supply(self) -> int:
        """Budget delivered in one task period, ``N * Q_s``."""
        return self.n_periods * self.budget


@dataclass(frozen=True, eq=False)
class ChainCoefficients:
    """Scalar row structure of the collapsed DTMC.

    ``b[k - 1]`` holds ``b_k`` for ``k = 1..H``; ``b_{H-i}`` is the
    probability of jumping from state ``i < H`` back to state 0.
    A chain flagged ``always_meets`` never leaves state 0 and carries no
    coefficients.
    """

    a: np.ndarray
    b: np.ndarray
    H: int
    n: int
    w_units: int
    params: ReservationParams | None = None
    always_meets: bool = False
    lumped: bool = False
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "_cum", np.cumsum(a))
        if self.always_meets:
            return
        if a.size != self.n + 1 or b.size != self.H:
            raise ValueError("coefficient lengths do not match H and n")
        if not 1 <= self.H <= self.n:
            raise ValueError("need 1 <= H <= n")
        if a[0] <= 0 or a[-1] <= 0 or np.any(a < 0):
            raise ValueError("a_0 and a_n must be positive and all a_j nonnegative")
        if abs(a.sum() - 1.0) > _SUM_TOL:
            raise ValueError("coefficients must sum to 1")

    @classmethod
    def from_row(cls, a, H: int, **kwargs) -> "ChainCoefficients":
        """Chain defined by its recursive row alone (boundary column derived)."""
        a = np.asarray(a, dtype=float)
        b = np.cumsum(a)[1:H + 1]
        kwargs.setdefault("w_units", H)
        return cls(a=a, b=b, H=H, n=a.size - 1, **kwargs)

    @property
    def alpha(self) -> np.ndarray:
        """``alpha_j = a_j / a_0``."""
        return self.a / self.a[0]

    def cumulative(self, k):
        """``sum_{j <= k} a_j`` (vectorised; 0 for negative ``k``)."""
        k = np.asarray(k)
        out = self._cum[np.clip(k, 0, self.n)]
        return np.where(k < 0, 0.0, out)

    def entries(self, rows, cols) -> np.ndarray:
        """Transition probabilities ``P[rows, cols]`` (broadcasting)."""
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        step = self.H + cols - rows
        inside = (step >= 0) & (step <= self.n)
        right = np.where(inside, self.a[np.clip(step, 0, self.n)], 0.0)
        to_zero = self.cumulative(self.H - rows)
        return np.where(cols == 0, to_zero, right)

    def transition_matrix(self, size: int) -> np.ndarray:
        """Top-left ``size x size`` corner of the infinite transition matrix."""
        idx = np.arange(size)
        return self.entries(idx[:, None], idx[None, :])


@dataclass(frozen=True, eq=False)
class QbdpBlocks:
    """Level blocks of order ``F`` (levels are runs of ``F`` consecutive states).

    ``A0`` moves one level down, ``A1`` stays, ``A2`` moves one level up;
    ``C`` is the boundary level's local block.
    """

    F: int
    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    C: np.ndarray


def build_chain(pmf: PMF, params: ReservationParams) -> ChainCoefficients:
    """Collapsed DTMC coefficients for a PMF already resampled to ``params.delta``."""
    delta = params.delta
    if params.supply % delta:
        raise ValueError("N*Q_s must be divisible by delta")
    vals = pmf.values
    if np.any(vals % delta):
        raise ValueError(f"pmf is not resampled to delta={delta}")
    units = vals // delta
    m_min, m_max = int(units[0]), int(units[-1])
    w_units = params.supply // delta
    if m_max <= w_units:
        return ChainCoefficients(a=np.ones(1), b=np.ones(0), H=0, n=0, w_units=w_units,
                                 params=params, always_meets=True)
    if m_min >= w_units:
        raise DivergentReservationError("divergent reservation: minimum demand exceeds supply")
    u = np.bincount(units - m_min, weights=pmf.masses)
    H = w_units - m_min
    n = m_max - m_min
    b = np.cumsum(u)[1:H + 1]
    return ChainCoefficients(a=u, b=b, H=H, n=n, w_units=w_units, params=params)


def gamma(chain: ChainCoefficients, k: int, l):
    """``sum_{j=0}^{k} alpha_j * l**(k-j)`` (``l`` may be complex)."""
    if not 0 <= k <= chain.n:
        raise ValueError(f"k={k} outside 0..{chain.n}")
    acc = 0.0
    for coeff in chain.alpha[:k + 1]:
        acc = acc * l + coeff
    return acc


def drift_d1(chain: ChainCoefficients) -> float:
    """Normalised drift ``D_1``; positive iff the chain is positive recurrent."""
    if chain.always_meets:
        return float("inf")
    alpha = chain.alpha
    H = chain.H
    toward_zero = np.cumsum(alpha[:H]).sum()
    away = np.dot(np.arange(1, chain.n - H + 1), alpha[H + 1:])
    return float(toward_zero - away)


def classify(chain: ChainCoefficients) -> Classification:
    if drift_d1(chain) > 0:
        return Classification.POSITIVE_RECURRENT
    return Classification.TRANSIENT_OR_NULL


def blocks(chain: ChainCoefficients) -> QbdpBlocks:
    if chain.always_meets or chain.n < 1:
        raise ValueError("no QBD structure for a degenerate chain")
    F = max(chain.n - chain.H, chain.H)
    r = np.arange(F)[:, None]
    c = np.arange(F)[None, :]
    C = chain.entries(r, c)
    A2 = chain.entries(r, c + F)
    A1 = chain.entries(r + F, c + F)
    A0 = chain.entries(r + F, c)
    return QbdpBlocks(F=F, A0=A0, A1=A1, A2=A2, C=C)


def lump(chain: ChainCoefficients) -> ChainCoefficients:
    """Route every leftward transition to the adjacent lower state (``H' = 1``)."""
    if chain.always_meets or chain.H == 1:
        return chain
    H = chain.H
    a = np.concatenate(([chain.a[:H].sum()], chain.a[H:]))
    return replace(chain, a=a, b=np.array([chain.b[-1]]), H=1, n=chain.n - H + 1,
                   lumped=True)


def chain_to_json(chain: ChainCoefficients) -> str:
    """Debug dump used by ``--dump-chain``."""
    record = {
        "W_units": chain.w_units,
        "H": chain.H,
        "n": chain.n,
        "a": chain.a.tolist(),
        "b": chain.b.tolist(),
        "always_meets": chain.always_meets,
        "lumped": chain.lumped,
    }
    if not chain.always_meets:
        record["classification"] = classify(chain).value
        record["D1"] = drift_d1(chain)
    return json.dumps(record, indent=2)
