"""Steady-state solvers for the collapsed reservation chain.

Three routes to ``pi^(0)``, the probability that a job's response-time
bound stays within ``N*T_s``:

* :func:`analytic_bound` -- closed form on the lumped (``H = 1``) chain, a
  lower bound on the exact value;
* :func:`companion_solve` -- product of ``1 - beta`` over the stable roots
  of the chain's characteristic polynomial;
* :func:`matrix_geometric_solve` -- rate matrix ``R`` of the level-blocked
  QBD, by cyclic reduction (or plain fixed-point iteration).
"""

from __future__ import annotations

import enum
import logging
import math
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from cbsprob.qbdp import (
    ChainCoefficients,
    Classification,
    QbdpBlocks,
    blocks,
    classify,
    drift_d1,
    lump,
)

log = logging.getLogger(__name__)

UNIT_CIRCLE_TOL = 1e-9
ROOT_SEPARATION = 1e-9
IMAG_TOL = 1e-9
CONSISTENCY_TOL = 1e-8


class SolverError(ArithmeticError):
    """Numerical failure inside a solver."""


class Method(str, enum.Enum):
    ANALYTIC = "analytic"
    COMPANION = "companion"
    MATRIX_GEOMETRIC = "cyclic-reduction"


@dataclass(eq=False)
class SteadyState:
    """Steady-state distribution of the collapsed chain.

    ``boundary`` holds ``pi^(1)..pi^(H-1)``.  States from ``H`` onward are
    produced on demand by :func:`tail`; the generator memoises its output.
    """

    classification: Classification
    pi0: float
    boundary: np.ndarray
    method: Method
    conservative: bool
    H: int
    consistency_gap: float | None = None
    _generator: Callable[[int], np.ndarray] | None = field(default=None, repr=False)
    _cache: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def states(self, count: int) -> np.ndarray:
        """``pi^(0)..pi^(count-1)``."""
        if count <= 0:
            return np.zeros(0)
        if self.classification is not Classification.POSITIVE_RECURRENT or self._generator is None:
            out = np.zeros(count)
            if self._generator is None and self.pi0 == 1.0:
                out[0] = 1.0
            return out
        with self._lock:
            if self._cache.size < count:
                self._cache = np.clip(self._generator(max(count, 2 * self._cache.size)), 0.0, 1.0)
            return self._cache[:count].copy()

    def as_record(self) -> dict:
        return {
            "method": self.method.value,
            "classification": self.classification.value,
            "pi0": self.pi0,
            "boundary": self.boundary.tolist(),
            "conservative": self.conservative,
        }


def _zero_state(method: Method, H: int) -> SteadyState:
    return SteadyState(Classification.TRANSIENT_OR_NULL, 0.0, np.zeros(max(H - 1, 0)),
                       method, method is Method.ANALYTIC, H)


def _always_meets(method: Method) -> SteadyState:
    return SteadyState(Classification.POSITIVE_RECURRENT, 1.0, np.zeros(0), method,
                       method is Method.ANALYTIC, 0)


def _forward_recursion(chain: ChainCoefficients, head: np.ndarray, count: int) -> np.ndarray:
    """Extend ``pi^(0)..pi^(H-1)`` by the balance equations of columns ``0, 1, ...``.

    Column ``l >= 1`` gives ``pi^(H+l) = w pi^(l) - sum_{j != H} alpha_j pi^(l+H-j)``
    with ``w = 1/a_0 - alpha_H``.  Rounding errors grow along the unstable
    roots, so this is only used when ``H = 1``.
    """
    H, n = chain.H, chain.n
    alpha = chain.alpha
    out = np.zeros(max(count, H + 1))
    out[:H] = head
    out[H] = (out[0] * (1.0 - chain.b[-1]) - np.dot(out[1:H], chain.b[-2::-1][:H - 1])) / chain.a[0]
    for idx in range(H + 1, out.size):
        lo = max(0, idx - n)
        out[idx] = out[idx - H] / chain.a[0] - np.dot(alpha[idx - lo:0:-1], out[lo:idx])
    return out[:count]


def analytic_bound(chain: ChainCoefficients) -> SteadyState:
    """Closed-form lower bound on ``pi^(0)`` from the lumped chain.

    ``pi^(0) = max(1 - sum_{j>=2} (j-1) a'_j / a'_0, 0)``.
    """
    if chain.always_meets:
        return _always_meets(Method.ANALYTIC)
    lumped = lump(chain)
    alpha = lumped.alpha
    pi0 = 1.0 - float(np.dot(np.arange(1, lumped.n), alpha[2:]))
    if pi0 <= 0.0:
        # the bound is vacuous; the classification still describes the unlumped chain
        state = _zero_state(Method.ANALYTIC, chain.H)
        state.classification = classify(chain)
        return state
    generator = lambda count: _forward_recursion(lumped, np.array([pi0]), count)
    state = SteadyState(Classification.POSITIVE_RECURRENT, pi0, np.zeros(0), Method.ANALYTIC,
                        True, 1, _generator=generator)
    return state


def analytic_unclamped(chain: ChainCoefficients) -> float:
    """The analytic expression before clamping at zero."""
    lumped = lump(chain)
    return 1.0 - float(np.dot(np.arange(1, lumped.n), lumped.alpha[2:]))


def char_poly(chain: ChainCoefficients) -> np.ndarray:
    """Monic coefficients (highest degree first) of the companion polynomial.

    ``P(x) = x^n - w x^(n-H) + sum_{j != H} alpha_j x^(n-j)`` with
    ``w = gamma(H-1, 1) + sum_{j>H} alpha_j``.
    """
    alpha = chain.alpha
    coeffs = alpha.copy()
    coeffs[chain.H] = -(alpha[:chain.H].sum() + alpha[chain.H + 1:].sum())
    return coeffs


def _deflate_unit_root(coeffs: np.ndarray) -> np.ndarray:
    quotient, remainder = np.polydiv(coeffs, np.array([1.0, -1.0]))
    scale = np.abs(coeffs).sum()
    if abs(remainder[-1]) > 1e-9 * scale:
        raise SolverError("characteristic polynomial does not vanish at 1")
    return quotient


def characteristic_roots(chain: ChainCoefficients) -> np.ndarray:
    """Roots of the polynomial with the unit root removed."""
    deflated = _deflate_unit_root(char_poly(chain))
    # eigenvalues of the (balanced) companion matrix; no Newton polish, see README
    roots = np.roots(deflated)
    if roots.size != chain.n - 1:
        raise SolverError("unexpected root count")
    return roots


def _check_simple(roots: np.ndarray) -> None:
    for lo in range(0, roots.size, 512):
        block = np.abs(roots[lo:lo + 512, None] - roots[None, :])
        block[np.arange(block.shape[0]), np.arange(lo, lo + block.shape[0])] = np.inf
        if block.size and block.min() <= ROOT_SEPARATION:
            raise SolverError("eigenvalue multiplicity violates the distinct-root assumption")


def _partition(roots: np.ndarray, H: int) -> tuple[np.ndarray, np.ndarray]:
    mod = np.abs(roots)
    if np.any(np.abs(mod - 1.0) <= UNIT_CIRCLE_TOL):
        raise SolverError("root on unit circle")
    stable = roots[mod < 1.0]
    unstable = roots[mod > 1.0]
    if unstable.size != H - 1:
        raise SolverError(f"root partition inconsistent: {unstable.size} unstable roots, "
                          f"expected {H - 1}")
    return stable, unstable


def _stable_product(stable: np.ndarray) -> float:
    prod = complex(np.prod(1.0 - stable))
    if abs(prod.imag) > IMAG_TOL:
        raise SolverError(f"stable-root product has imaginary residue {prod.imag:.3g}")
    return prod.real


def _boundary_rows(chain: ChainCoefficients, x: complex) -> np.ndarray:
    """Row ``[sum_{q <= H-1-k} gamma(q, x)]_{k=0..H-1}``, divided by ``x^(H-1)`` when ``|x| > 1``."""
    H = chain.H
    alpha = chain.alpha[:H]
    if abs(x) <= 1.0:
        g = np.empty(H, dtype=complex)
        acc = 0.0
        for q in range(H):
            acc = acc * x + alpha[q]
            g[q] = acc
        cum = np.cumsum(g)
    else:
        inv = 1.0 / x
        # gamma(q, x) / x^q accumulates alpha_q x^-q; rescale to x^-(H-1)
        powers = inv ** np.arange(H)
        scaled = np.cumsum(alpha * powers)  # gamma(q, x) / x^q
        g = scaled * x ** (np.arange(H) - (H - 1))  # gamma(q, x) / x^(H-1)
        cum = np.cumsum(g)
    return cum[::-1]  # column k uses the sum up to q = H-1-k


def _solve_boundary(chain: ChainCoefficients, unstable: np.ndarray, d1: float) -> np.ndarray:
    H = chain.H
    rows = [_boundary_rows(chain, beta) for beta in unstable]
    rows.append(_boundary_rows(chain, 1.0))
    A = np.array(rows, dtype=complex)
    rhs = np.zeros(H, dtype=complex)
    rhs[-1] = d1
    with warnings.catch_warnings():
        # conditioning is judged by the consistency gap against the root product
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        sol = linalg.solve(A, rhs)
    return sol.real


def _distribution_from_roots(pi0: float, stable: np.ndarray, count: int) -> np.ndarray:
    """``pi^(0)..pi^(count-1)`` from the generating function ``pi0 / prod(1 - beta z)``.

    Coefficients are recovered by an FFT over the unit circle, with the
    transform length chosen so aliased mass (``~ r^M`` for the largest
    stable modulus ``r``) is negligible.
    """
    if stable.size == 0:
        out = np.zeros(count)
        out[0] = pi0
        return out
    r = float(np.max(np.abs(stable)))
    needed = count + (math.log(1e-18) / math.log(r) if r > 0 else 1)
    size = 1 << max(6, math.ceil(math.log2(max(2 * count, needed))))
    size = min(size, 1 << 22)
    z = np.exp(2j * np.pi * np.arange(size) / size)
    log_gen = np.full(size, math.log(pi0), dtype=complex)
    for lo in range(0, stable.size, 64):
        log_gen -= np.log(1.0 - np.outer(stable[lo:lo + 64], z)).sum(axis=0)
    coeffs = np.fft.fft(np.exp(log_gen)).real / size
    return coeffs[:count]


def lattice_step(chain: ChainCoefficients) -> int:
    """Common divisor ``g`` of ``H`` and every index with ``a_j > 0``.

    When ``g > 1`` only states that are multiples of ``g`` are recurrent and
    the characteristic polynomial is a polynomial in ``x^g``, so every
    ``g``-th root of unity is a root.
    """
    g = chain.H
    for j in np.flatnonzero(chain.a):
        g = math.gcd(g, int(j))
    return max(g, 1)


def _spread(values: np.ndarray, g: int, count: int) -> np.ndarray:
    out = np.zeros(count)
    out[::g] = values[:len(range(0, count, g))]
    return out


def _solve_on_lattice(chain: ChainCoefficients, g: int) -> SteadyState:
    reduced = ChainCoefficients.from_row(chain.a[::g], chain.H // g, w_units=chain.w_units // g)
    sub = companion_solve(reduced)
    head = _spread(sub.states(reduced.H), g, chain.H)
    return SteadyState(sub.classification, sub.pi0, head[1:], Method.COMPANION, False,
                       chain.H, consistency_gap=sub.consistency_gap,
                       _generator=lambda count: _spread(sub.states(-(-count // g)), g, count))


def companion_solve(chain: ChainCoefficients) -> SteadyState:
    """Exact ``pi^(0)`` of the resampled chain from the characteristic roots."""
    if chain.always_meets:
        return _always_meets(Method.COMPANION)
    if classify(chain) is Classification.TRANSIENT_OR_NULL:
        return _zero_state(Method.COMPANION, chain.H)
    g = lattice_step(chain)
    if g > 1:
        return _solve_on_lattice(chain, g)
    roots = characteristic_roots(chain)
    _check_simple(roots)
    stable, unstable = _partition(roots, chain.H)
    pi0 = _stable_product(stable)
    if not 0.0 < pi0 <= 1.0:
        raise SolverError(f"stable-root product {pi0!r} is not a probability")
    d1 = drift_d1(chain)
    H = chain.H
    boundary_sys = _solve_boundary(chain, unstable, d1)
    gap = abs(boundary_sys[0] - pi0)
    head = _distribution_from_roots(pi0, stable, H)
    if gap <= CONSISTENCY_TOL:
        boundary = boundary_sys[1:]
    else:
        log.warning("boundary system disagrees with the root product by %.3g (H=%d); "
                    "using the stable-factor expansion", gap, H)
        boundary = head[1:]
    state = SteadyState(Classification.POSITIVE_RECURRENT, pi0, np.clip(boundary, 0, 1),
                        Method.COMPANION, False, H, consistency_gap=gap,
                        _generator=lambda count: _distribution_from_roots(pi0, stable, count))
    return state


def _cyclic_reduction(blk: QbdpBlocks, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Minimal solution ``G`` of ``G = A0 + A1 G + A2 G^2`` (down, local, up)."""
    F = blk.F
    eye = np.eye(F)
    down, local, up = blk.A0.copy(), blk.A1.copy(), blk.A2.copy()
    hat = blk.A1.copy()
    for _ in range(max_iter):
        K = linalg.solve(eye - local, np.hstack([down, up]))
        K_down, K_up = K[:, :F], K[:, F:]
        up_K_down = up @ K_down
        down_K_up = down @ K_up
        hat = hat + up_K_down
        local = local + up_K_down + down_K_up
        down = down @ K_down
        up = up @ K_up
        if np.abs(up).sum(axis=1).max() < tol or np.abs(down).sum(axis=1).max() < tol:
            break
    else:
        raise SolverError("cyclic reduction did not converge")
    return linalg.solve(eye - hat, blk.A0)


def _fixed_point_R(blk: QbdpBlocks, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    F = blk.F
    inv = linalg.inv(np.eye(F) - blk.A1)
    R = np.zeros((F, F))
    for _ in range(max_iter):
        nxt = (blk.A2 + R @ R @ blk.A0) @ inv
        if np.abs(nxt - R).max() < tol:
            return nxt
        R = nxt
    raise SolverError("fixed-point iteration on R did not converge in 1e5 steps")


def _spectral_radius_bound(R: np.ndarray, iters: int = 500) -> float:
    """Collatz-Wielandt upper bound on the Perron root of a nonnegative matrix."""
    x = np.ones(R.shape[0])
    bound = np.inf
    for _ in range(iters):
        y = x @ R + 1e-300
        bound = min(bound, float(np.max(y / x)))
        x = y / y.max() + 1e-15
        if bound < 1.0 - 1e-10:
            break
    return bound


def rate_matrix(blk: QbdpBlocks, variant: str = "cyclic-reduction") -> np.ndarray:
    """Minimal nonnegative ``R`` with ``R = A2 + R A1 + R^2 A0``."""
    if variant == "cyclic-reduction":
        G = _cyclic_reduction(blk)
        R = blk.A2 @ linalg.inv(np.eye(blk.F) - blk.A1 - blk.A2 @ G)
    elif variant == "fixed-point":
        R = _fixed_point_R(blk)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    residual = np.abs(blk.A2 + R @ blk.A1 + R @ R @ blk.A0 - R).max()
    if residual > 1e-10:
        raise SolverError(f"rate matrix residual {residual:.3g}")
    return np.clip(R, 0.0, None)


def matrix_geometric_solve(blk: QbdpBlocks | None, chain: ChainCoefficients,
                           variant: str = "cyclic-reduction") -> SteadyState:
    """Level-blocked steady state ``pi_k = pi_0 R^k``."""
    if chain.always_meets:
        return _always_meets(Method.MATRIX_GEOMETRIC)
    if blk is None:
        blk = blocks(chain)
    F = blk.F
    R = rate_matrix(blk, variant)
    if _spectral_radius_bound(R) >= 1.0 - 1e-10:
        raise SolverError("not positive recurrent: spectral radius of R is not below 1")
    eye = np.eye(F)
    # pi_L0 (C + R A0) = pi_L0 with pi_L0 (I - R)^-1 1 = 1
    M = (eye - blk.C - R @ blk.A0).T
    norm = linalg.solve(eye - R, np.ones(F))
    M[-1, :] = norm
    rhs = np.zeros(F)
    rhs[-1] = 1.0
    level0 = linalg.solve(M, rhs)
    if np.any(level0 < -1e-10):
        raise SolverError("negative boundary probabilities")

    def generator(count: int) -> np.ndarray:
        levels = [level0]
        while len(levels) * F < count:
            levels.append(levels[-1] @ R)
        return np.concatenate(levels)[:count]

    H = chain.H
    head = generator(max(H, 1))
    return SteadyState(Classification.POSITIVE_RECURRENT, float(level0[0]),
                       np.clip(head[1:H], 0, 1), Method.MATRIX_GEOMETRIC, False, H,
                       _generator=generator)


def tail(state: SteadyState, chain: ChainCoefficients | None, count: int) -> np.ndarray:
    """``pi^(H)..pi^(H+count-1)`` of a solved state."""
    H = max(state.H, 1)
    return state.states(H + count)[H:]


def deadline_probability(state: SteadyState, chain: ChainCoefficients, deadline: int) -> float:
    """Lower bound on ``P{response time <= deadline}`` for ``deadline = l*T_s``, ``l >= N``.

    State ``j`` stands for backlog ``N*Q_s + j*delta``; it meets the
    deadline when ``ceil(backlog / Q_s) <= l``.
    """
    params = chain.params
    if params is None:
        raise ValueError("chain carries no reservation parameters")
    if deadline % params.server_period or deadline < params.task_period:
        raise ValueError("deadline below model resolution")
    periods = deadline // params.server_period
    if state.pi0 == 1.0 or periods == params.n_periods:
        return state.pi0
    extra = (periods - params.n_periods) * params.budget
    last_state = extra // params.delta  # largest j with N*Q_s + j*delta <= l*Q_s
    probs = state.states(last_state + 1)
    return float(min(1.0, math.fsum(probs)))


def solve(chain: ChainCoefficients, method: Method | str) -> SteadyState:
    """Dispatch on a solver token (``analytic``, ``companion``, ``cyclic-reduction``)."""
    method = Method(method)
    start = time.perf_counter()
    if method is Method.ANALYTIC:
        state = analytic_bound(chain)
    elif method is Method.COMPANION:
        state = companion_solve(chain)
    elif chain.always_meets:
        state = _always_meets(Method.MATRIX_GEOMETRIC)
    elif classify(chain) is Classification.TRANSIENT_OR_NULL:
        state = _zero_state(Method.MATRIX_GEOMETRIC, chain.H)
    else:
        state = matrix_geometric_solve(None, chain)
    log.debug("%s solve in %.1f ms", method.value, 1e3 * (time.perf_counter() - start))
    return state
