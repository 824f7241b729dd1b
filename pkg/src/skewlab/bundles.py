"""Strong stable/unstable directions, Lyapunov spectra, and pinch bounds.

The strong unstable direction at a point is obtained by pushing a seed
vector forward along a finite backward orbit; domination makes the
projective contraction enormous (a factor of roughly 2n/mu^{2[n]} per step),
so a handful of iterations converge to machine precision.  The fiber
component of the resulting unit vector is pinched into an explicit band of
width O(lam^n) around lam^n times the eigenvector projection, which is the
quantitative transversality statement under test.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import mpmath as mp
import numpy as np

from .precision import derive_rng
from .skewmap import (
    MapParams,
    block_matrices,
    derivative,
    forward,
    orbit_points,
)
from .torus import TorusPoint, random_point, split_vector


@dataclass(frozen=True)
class BundleEstimate:
    point: TorusPoint
    flavor: str
    vector: np.ndarray
    iterations: int
    convergence_gap: float
    converged: bool


def direction_gap(v: np.ndarray, w: np.ndarray) -> float:
    """Sine of the angle between two unit vectors, sign-blind.

    Rejection norm rather than arccos of the dot product: the latter cannot
    resolve angles below ~1.5e-8 (the arccos granularity next to 1).
    """
    rej = v - float(np.dot(v, w)) * w
    return min(float(np.linalg.norm(rej)), float(np.linalg.norm(v + float(np.dot(v, w)) * w)))


def invariant_direction(params: MapParams, m: TorusPoint, flavor: str,
                        n_iter: int, tol: float = 1e-9) -> BundleEstimate:
    """Finite-time strong direction at m via projectivized cocycle iteration.

    uu pushes a seed forward from the n-th backward iterate; ss pulls a seed
    backward from the n-th forward iterate.  The convergence gap compares
    the depth-n and depth-(n-1) estimates, both expressed at m itself.
    """
    if flavor not in ("uu", "ss"):
        raise ValueError(f"flavor must be 'uu' or 'ss', got {flavor!r}")
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    mat = params.matrix
    if flavor == "uu":
        chain = orbit_points(params, m, -n_iter)[::-1]  # m_{-n}, ..., m
        seed = np.concatenate([np.zeros(2), mat.e_u])
        direction = "forward"
    else:
        chain = orbit_points(params, m, n_iter)[::-1]   # m_{+n}, ..., m
        seed = np.concatenate([np.zeros(2), mat.e_s])
        direction = "backward"
    v = seed.copy()
    prev = None
    for i, point in enumerate(chain[:-1]):
        d = derivative(params, point, direction)
        v = d.apply(v)
        v /= np.linalg.norm(v)
        if i == 0:
            prev = seed.copy()
        else:
            prev = d.apply(prev)
            prev /= np.linalg.norm(prev)
    gap = direction_gap(v, prev) if prev is not None else math.inf
    sv = split_vector(mat, v)
    sign = sv.v_u if flavor == "uu" else sv.v_s
    if sign < 0:
        v = -v
    v.setflags(write=False)
    return BundleEstimate(point=m, flavor=flavor, vector=v, iterations=n_iter,
                          convergence_gap=gap, converged=bool(gap <= tol))


# ---------------------------------------------------------------------------
# pinch bounds for the fiber components of the strong directions


@dataclass(frozen=True)
class PinchReport:
    n_points: int
    scale: float
    center_u: float
    center_s: float
    halfwidth: float
    ratios_u: tuple[float, float]
    ratios_s: tuple[float, float]
    worst_gap: float
    passed: bool


def transversality_check(params: MapParams, n_points: int, seed: int,
                         n_iter: int = 6, tol: float = 1e-7) -> PinchReport:
    """Sampled pinch bounds |v_x| / lam^n in center +- (3 lam^n + tol).

    The stable-side constant is the x-projection of the stable eigenvector:
    the coordinate swap conjugacy exchanges the roles of x and y and replaces
    the base matrix by its inverse, whose expanding unit vector is e_s.
    """
    if params.n > 40.0:
        raise ValueError("pinch ratios need lam^n above double granularity; use n <= 40")
    lam = params.matrix.lam
    scale = lam ** (params.k_base - params.k_couple)
    center_u = abs(params.matrix.e_u[0])
    center_s = abs(params.matrix.e_s[0])
    halfwidth = 3.0 * scale + tol
    rng = derive_rng(seed, 41)
    lo_u, hi_u = math.inf, -math.inf
    lo_s, hi_s = math.inf, -math.inf
    worst_gap = 0.0
    for _ in range(n_points):
        m = random_point(rng, params.bits)
        uu = invariant_direction(params, m, "uu", n_iter)
        ss = invariant_direction(params, m, "ss", n_iter)
        worst_gap = max(worst_gap, uu.convergence_gap, ss.convergence_gap)
        r_u = abs(uu.vector[0]) / scale
        r_s = abs(ss.vector[1]) / scale
        lo_u, hi_u = min(lo_u, r_u), max(hi_u, r_u)
        lo_s, hi_s = min(lo_s, r_s), max(hi_s, r_s)
    passed = (center_u - halfwidth <= lo_u and hi_u <= center_u + halfwidth
              and center_s - halfwidth <= lo_s and hi_s <= center_s + halfwidth)
    return PinchReport(n_points=n_points, scale=scale, center_u=center_u,
                       center_s=center_s, halfwidth=halfwidth,
                       ratios_u=(lo_u, hi_u), ratios_s=(lo_s, hi_s),
                       worst_gap=worst_gap, passed=bool(passed))


# ---------------------------------------------------------------------------
# finite-time Lyapunov spectra


@dataclass(frozen=True)
class LyapunovReport:
    point: TorusPoint
    horizon: int
    exponents: tuple[float, float, float, float]
    sum_defect: float


def _step_matrices(params: MapParams, pts: list[TorusPoint]) -> np.ndarray:
    """(M, 4, 4) forward derivative matrices at a batch of points."""
    xs = np.array([p.fiber.x for p in pts])
    mats = block_matrices(params, xs, "forward")
    pert = params.perturbation
    if pert is not None:
        plain = dataclasses.replace(params, perturbation=None)
        cursor = np.array([forward(plain, p).angles() for p in pts])
        eye = np.eye(4)
        for term in pert.terms:
            kvec = np.array(term.freq, dtype=float)
            arg = cursor @ kvec + term.phase
            c = term.amp * np.cos(arg)
            jac = np.broadcast_to(eye, mats.shape).copy()
            jac[:, term.target, :] += c[:, None] * kvec
            mats = jac @ mats
            cursor[:, term.target] += term.amp * np.sin(arg)
    return mats


def _base_block_logs(params: MapParams, horizon: int) -> tuple[float, float]:
    """Accumulated QR log-diagonals for the constant integer base block.

    The contracted direction loses about k_base*log2(mu) bits to cancellation
    against entries of size mu^k_base, so plain doubles saturate near n = 9;
    the chain runs at a precision that keeps 96 bits past the cancellation.
    Point-independent, hence computed once per spectrum batch.
    """
    (a00, a01), (a10, a11) = params.matrix.power(params.k_base)
    prec = int(math.ceil(params.k_base * math.log2(params.matrix.mu))) + 96
    with mp.workprec(prec):
        q = [mp.mpf(1), mp.mpf(0), mp.mpf(0), mp.mpf(1)]
        acc1 = mp.mpf(0)
        acc2 = mp.mpf(0)
        for _ in range(horizon):
            w1 = (a00 * q[0] + a01 * q[1], a10 * q[0] + a11 * q[1])
            w2 = (a00 * q[2] + a01 * q[3], a10 * q[2] + a11 * q[3])
            r11 = mp.sqrt(w1[0] ** 2 + w1[1] ** 2)
            q1 = (w1[0] / r11, w1[1] / r11)
            r12 = q1[0] * w2[0] + q1[1] * w2[1]
            u2 = (w2[0] - r12 * q1[0], w2[1] - r12 * q1[1])
            r22 = mp.sqrt(u2[0] ** 2 + u2[1] ** 2)
            q = [q1[0], q1[1], u2[0] / r22, u2[1] / r22]
            acc1 += mp.log(r11)
            acc2 += mp.log(abs(r22))
        return float(acc1), float(acc2)


def lyapunov_batch(params: MapParams, points: list[TorusPoint],
                   horizon: int) -> list[LyapunovReport]:
    """QR-reorthonormalized finite-time spectra for a batch of points.

    Unperturbed, the cocycle is block-triangular, so the spectrum splits
    into the varying fiber block (batched double QR) and the constant base
    block (extended-precision QR, shared across the batch).  With shears on,
    triangularity is gone and the full 4x4 runs in doubles; that path only
    resolves the bottom exponent while mu^{2 k_base} stays within doubles.
    """
    if horizon < 100:
        raise ValueError("horizon must be at least 100 for a meaningful spectrum")
    count = len(points)
    current = list(points)
    if params.perturbation is None:
        b1, b2 = _base_block_logs(params, horizon)
        frames = np.broadcast_to(np.eye(2), (count, 2, 2)).copy()
        logs = np.zeros((count, 2))
        for _ in range(horizon):
            xs = np.array([p.fiber.x for p in current])
            ds = np.zeros((count, 2, 2))
            ds[:, 0, 0] = params.n * np.cos(xs) + 2.0
            ds[:, 0, 1] = -1.0
            ds[:, 1, 0] = 1.0
            frames, r = np.linalg.qr(np.matmul(ds, frames))
            diag = np.abs(np.einsum("nii->ni", r))
            if not np.all(np.isfinite(diag)) or np.any(diag == 0.0):
                raise ArithmeticError("non-finite growth accumulation in QR sweep")
            logs += np.log(diag)
            current = [forward(params, p) for p in current]
        full = np.concatenate(
            [logs, np.broadcast_to(np.array([b1, b2]), (count, 2))], axis=1)
    else:
        frames = np.broadcast_to(np.eye(4), (count, 4, 4)).copy()
        full = np.zeros((count, 4))
        for _ in range(horizon):
            mats = _step_matrices(params, current)
            frames, r = np.linalg.qr(np.matmul(mats, frames))
            diag = np.abs(np.einsum("nii->ni", r))
            if not np.all(np.isfinite(diag)) or np.any(diag == 0.0):
                raise ArithmeticError("non-finite growth accumulation in QR sweep")
            full += np.log(diag)
            current = [forward(params, p) for p in current]
    out = []
    for point, row in zip(points, full):
        exps = tuple(sorted((row / horizon).tolist(), reverse=True))
        out.append(LyapunovReport(point=point, horizon=horizon, exponents=exps,
                                  sum_defect=abs(sum(exps))))
    return out


def lyapunov_spectrum(params: MapParams, m: TorusPoint, horizon: int) -> LyapunovReport:
    return lyapunov_batch(params, [m], horizon)[0]


# ---------------------------------------------------------------------------
# conservativity


def volume_defect(params: MapParams, n_samples: int, seed: int = 0) -> float:
    """Max |det Df - 1| over random samples, computed blockwise."""
    rng = derive_rng(seed, 43)
    worst = 0.0
    for _ in range(n_samples):
        m = random_point(rng, params.bits)
        worst = max(worst, derivative(params, m).det_defect())
    return worst
