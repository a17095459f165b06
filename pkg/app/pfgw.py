# app/pfgw.py
"""
Partial fused Gromov-Wasserstein matching between two measure networks.

The objective over relaxed couplings C (row sums <= p1, column sums <= p2, total m) is

    f(C) = (1 - alpha) <D^q, C> + alpha * sum_{i,j,k,l} |W1[i,k] - W2[j,l]|^q C[i,j] C[k,l]

with D the attribute (location) distance. It is minimized by conditional gradient:
the linearized problem is an exact partial transport solved with one virtual row and
column on top of POT's network simplex, followed by an exact line search.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import ot
from scipy.spatial.distance import cdist

from . import TopoTrackError
from .measure_net import MeasureNetwork

log = logging.getLogger(__name__)

MASS_TOL = 1e-9
EMD_MAX_ITER = 1_000_000


class SolverError(TopoTrackError, ValueError):
    pass


# ---------------------------------------------
# Models
# ---------------------------------------------

@dataclass(frozen=True, eq=False)
class Coupling:
    matrix: np.ndarray
    mass: float

    def total(self) -> float:
        return float(self.matrix.sum())


@dataclass(frozen=True, eq=False)
class PfgwResult:
    distance_q: float
    coupling: Coupling
    iterations: int
    converged: bool
    loss_history: Tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class MassSelection:
    m: float
    result: PfgwResult
    within_limit: bool          # False: no m passed the distance screen, offending mass zeroed
    tried: Tuple[float, ...] = ()


# ---------------------------------------------
# Partial linear OT
# ---------------------------------------------

def solve_partial_linear_ot(cost, p1, p2, m: float) -> Coupling:
    """
    Exact minimizer of <cost, C> over the relaxed couplings of mass m.

    A virtual row absorbs sum(p2) - m and a virtual column sum(p1) - m at zero cost;
    the virtual-virtual cell is priced out, so the real block carries exactly m.
    """
    M = np.asarray(cost, dtype=np.float64)
    a = np.asarray(p1, dtype=np.float64)
    b = np.asarray(p2, dtype=np.float64)
    if M.shape != (a.size, b.size):
        raise SolverError(f"cost shape {M.shape} does not match marginals {a.size}x{b.size}")
    if not np.all(np.isfinite(M)):
        raise SolverError("cost matrix must be finite")
    if np.any(a < 0) or np.any(b < 0):
        raise SolverError("marginals must be nonnegative")
    cap = min(a.sum(), b.sum())
    if not (0 < m <= cap + MASS_TOL):
        raise SolverError(f"mass m={m} outside (0, {cap}]")
    m = min(m, cap)

    # a constant shift changes every feasible objective by the same amount
    M = M - min(M.min(), 0.0)
    big = 2.0 * M.max() + 1.0

    n1, n2 = M.shape
    M_ext = np.zeros((n1 + 1, n2 + 1), dtype=np.float64)
    M_ext[:n1, :n2] = M
    M_ext[n1, n2] = big
    a_ext = np.append(a, max(b.sum() - m, 0.0))
    b_ext = np.append(b, max(a.sum() - m, 0.0))

    gamma, log_emd = ot.emd(a_ext, b_ext, M_ext, numItermax=EMD_MAX_ITER, log=True)
    if log_emd.get("warning") is not None:
        raise SolverError(f"exact transport failed: {log_emd['warning']}")

    C = np.clip(gamma[:n1, :n2], 0.0, None)
    return Coupling(matrix=C, mass=float(m))


# ---------------------------------------------
# Objective pieces
# ---------------------------------------------

def attribute_cost(N1: MeasureNetwork, N2: MeasureNetwork, q: int = 2) -> np.ndarray:
    """D^q, D the Euclidean distance between node locations in km."""
    return cdist(N1.locations_km, N2.locations_km) ** q


def _structure_operator(
    W1: np.ndarray, W2: np.ndarray, q: int
) -> Callable[[np.ndarray], np.ndarray]:
    """L(C)[i,j] = sum_{k,l} |W1[i,k] - W2[j,l]|^q C[k,l]."""
    if q == 2:
        W1sq, W2sq = W1 ** 2, W2 ** 2

        def L(C: np.ndarray) -> np.ndarray:
            rows, cols = C.sum(axis=1), C.sum(axis=0)
            return (W1sq @ rows)[:, None] + (W2sq @ cols)[None, :] - 2.0 * (W1 @ C @ W2.T)

        return L

    T = np.abs(W1[:, None, :, None] - W2[None, :, None, :]) ** q

    def L(C: np.ndarray) -> np.ndarray:
        return np.einsum("ijkl,kl->ij", T, C)

    return L


def pfgw_loss(D: np.ndarray, L: Callable, C: np.ndarray, alpha: float) -> float:
    return float((1.0 - alpha) * np.sum(D * C) + alpha * np.sum(L(C) * C))


def identity_coupling(p1, p2, m: float = 1.0) -> np.ndarray:
    """Warm start putting mass on the diagonal (networks of equal size)."""
    a, b = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    if a.size != b.size:
        raise SolverError("identity coupling needs networks of equal size")
    d = np.minimum(a, b)
    return np.diag(d * (m / d.sum()))


def _check_start(G0: np.ndarray, a: np.ndarray, b: np.ndarray, m: float) -> np.ndarray:
    G0 = np.asarray(G0, dtype=np.float64)
    if G0.shape != (a.size, b.size):
        raise SolverError(f"warm start has shape {G0.shape}, expected {(a.size, b.size)}")
    if (
        np.any(G0 < 0)
        or np.any(G0.sum(axis=1) > a + MASS_TOL)
        or np.any(G0.sum(axis=0) > b + MASS_TOL)
        or abs(G0.sum() - m) > MASS_TOL
    ):
        raise SolverError("warm start is not a relaxed coupling of mass m")
    return G0


# ---------------------------------------------
# Conditional gradient
# ---------------------------------------------

def solve_pfgw(
    N1: MeasureNetwork,
    N2: MeasureNetwork,
    alpha: float,
    m: float,
    q: int = 2,
    G0: Optional[np.ndarray] = None,
    max_iter: int = 200,
    stop_thr: float = 1e-9,
    normalize: bool = False,
) -> PfgwResult:
    """
    Conditional-gradient descent on the partial fused GW objective. The problem is
    nonconvex: the result is a stationary point, not a certified global optimum.
    """
    if not (0.0 <= alpha <= 1.0):
        raise SolverError(f"alpha must lie in [0, 1], got {alpha}")
    if len(N1) == 0 or len(N2) == 0:
        raise SolverError("networks must be nonempty")
    if q < 1:
        raise SolverError("q must be >= 1")
    a, b = N1.p, N2.p
    if not (0 < m <= min(a.sum(), b.sum()) + MASS_TOL):
        raise SolverError(f"mass m={m} outside (0, {min(a.sum(), b.sum())}]")

    D = attribute_cost(N1, N2, q)
    W1, W2 = N1.W, N2.W
    if normalize:
        D = D / D.max() if D.max() > 0 else D
        scale = max(W1.max(), W2.max())
        if scale > 0:
            W1, W2 = W1 / scale, W2 / scale
    L = _structure_operator(W1, W2, q)

    C = np.outer(a, b) * (m / (a.sum() * b.sum())) if G0 is None else _check_start(G0, a, b, m)
    f_val = pfgw_loss(D, L, C, alpha)
    history = [f_val]
    converged = False
    it = 0

    while it < max_iter:
        it += 1
        grad = (1.0 - alpha) * D + 2.0 * alpha * L(C)
        direction = solve_partial_linear_ot(grad, a, b, m).matrix
        delta = direction - C

        # f(C + g*delta) = f(C) + slope*g + curv*g^2
        slope = float(np.sum(grad * delta))
        curv = float(alpha * np.sum(L(delta) * delta))
        if slope >= 0:
            converged = True
            break
        if curv > 0:
            step = min(1.0, -slope / (2.0 * curv))
        else:
            step = 1.0

        C = C + step * delta
        old_val, f_val = f_val, pfgw_loss(D, L, C, alpha)
        history.append(f_val)
        log.debug("pfgw it %3d  loss %.10e  step %.4f", it, f_val, step)

        decrease = old_val - f_val
        if decrease <= stop_thr * max(abs(f_val), 1e-300) or f_val <= 0:
            converged = True
            break

    C = np.clip(C, 0.0, None)
    return PfgwResult(
        distance_q=max(f_val, 0.0),
        coupling=Coupling(matrix=C, mass=float(m)),
        iterations=it,
        converged=converged,
        loss_history=tuple(history),
    )


# ---------------------------------------------
# Mass selection
# ---------------------------------------------

def mass_candidates(m_range: Sequence[float] = (0.6, 0.9), step: float = 0.05) -> Tuple[float, ...]:
    lo, hi = m_range
    if step <= 0 or lo > hi or lo <= 0 or hi > 1:
        raise SolverError(f"empty mass range {m_range} with step {step}")
    n = int(np.floor((hi - lo) / step + 1e-9))
    return tuple(round(hi - k * step, 10) for k in range(n + 1))


def auto_select_mass(
    N1: MeasureNetwork,
    N2: MeasureNetwork,
    alpha: float,
    max_match_km: float,
    m_range: Sequence[float] = (0.6, 0.9),
    step: float = 0.05,
    q: int = 2,
    mass_epsilon: float = 1e-6,
    **solver_kwargs,
) -> MassSelection:
    """
    Highest m in `m_range` whose coupling moves no mass (>= mass_epsilon) between
    nodes farther apart than `max_match_km`. When none qualifies, the lowest m is
    kept with the offending entries zeroed.
    """
    if max_match_km <= 0:
        raise SolverError("max_match_km must be > 0")
    candidates = mass_candidates(m_range, step)
    dist = cdist(N1.locations_km, N2.locations_km)
    too_far = dist > max_match_km

    result = None
    for m in candidates:
        result = solve_pfgw(N1, N2, alpha, m, q=q, **solver_kwargs)
        offending = too_far & (result.coupling.matrix >= mass_epsilon)
        if not offending.any():
            log.debug("mass %.2f accepted after %d candidates", m, candidates.index(m) + 1)
            return MassSelection(m, result, True, candidates)

    C = result.coupling.matrix.copy()
    C[too_far & (C >= mass_epsilon)] = 0.0
    log.warning(
        "no mass in [%.2f, %.2f] keeps matches within %.1f km; using m=%.2f with %.3g mass dropped",
        candidates[-1], candidates[0], max_match_km, candidates[-1],
        result.coupling.mass - C.sum(),
    )
    screened = replace(result, coupling=Coupling(matrix=C, mass=float(C.sum())))
    return MassSelection(candidates[-1], screened, False, candidates)
