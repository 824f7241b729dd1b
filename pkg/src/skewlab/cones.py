"""Critical regions, invariant cone families, and one-step cone checks.

The twist map expands horizontal center directions except where |cos x| is
small; the critical strips around x = pi/2 and 3 pi/2 (half-width 2 n^-3/10)
are excised and everything is verified on their closed complement.  Stable
and unstable cones live around the base eigendirections with aperture alpha;
horizontal and vertical center cones compare fiber components with aperture
theta = n^-3/5.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .precision import derive_rng
from .skewmap import MapParams, block_matrices, derivative, forward, inverse
from .torus import (
    TWO_PI,
    HyperbolicMatrix,
    TorusPoint,
    circle_dist,
    random_point,
    split_batch,
    split_vector,
)

CRIT_CENTERS = (math.pi / 2.0, 3.0 * math.pi / 2.0)

CONE_KINDS = ("stable", "unstable", "horizontal", "vertical")


@dataclass(frozen=True)
class RegionSpec:
    """Critical strips of half-width 2 n^-3/10 around x (or y) = pi/2, 3 pi/2."""

    n: float
    half_width: float = None

    def __post_init__(self):
        expected = 2.0 * self.n ** -0.3
        if self.half_width is None:
            object.__setattr__(self, "half_width", expected)
        elif abs(self.half_width - expected) > 1e-12:
            raise ValueError(f"half_width must equal 2 n^-0.3 = {expected!r}")

    @property
    def centers(self) -> tuple[float, float]:
        return CRIT_CENTERS

    def excluded_fraction(self) -> float:
        """Fraction of the circle covered by the two open critical strips."""
        return 4.0 * self.half_width / TWO_PI


@dataclass(frozen=True)
class ConeSpec:
    kind: str
    size: float

    def __post_init__(self):
        if self.kind not in CONE_KINDS:
            raise ValueError(f"cone kind must be one of {CONE_KINDS}, got {self.kind!r}")
        if not self.size > 0.0:
            raise ValueError(f"cone aperture must be positive, got {self.size}")


def default_theta(n: float) -> float:
    return n ** -0.6


def in_good_region(n: float, m: TorusPoint, flavor: str) -> bool:
    """Closed complement of the open critical strips; flavor u tests x, s tests y."""
    if flavor not in ("u", "s"):
        raise ValueError(f"flavor must be 'u' or 's', got {flavor!r}")
    coord = m.fiber.x if flavor == "u" else m.fiber.y
    half = 2.0 * n ** -0.3
    return all(circle_dist(coord, c) >= half for c in CRIT_CENTERS)


def good_mask(n: float, coords: np.ndarray) -> np.ndarray:
    """Vectorized good-region test on an array of angles."""
    half = 2.0 * n ** -0.3
    ok = np.ones(np.shape(coords), dtype=bool)
    for c in CRIT_CENTERS:
        d = np.abs(np.mod(coords, TWO_PI) - c)
        ok &= np.minimum(d, TWO_PI - d) >= half
    return ok


def good_intervals(n: float) -> list[tuple[float, float]]:
    """Closed good intervals of one circle coordinate, listed in order."""
    half = 2.0 * n ** -0.3
    c1, c2 = CRIT_CENTERS
    return [(0.0, c1 - half), (c1 + half, c2 - half), (c2 + half, TWO_PI)]


def cone_ratio(mat: HyperbolicMatrix, cone: ConeSpec, v: np.ndarray) -> float:
    """Defining ratio of the cone inequality; <= size means membership."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ValueError("the zero vector belongs to every cone boundary; rejected")
    if cone.kind in ("horizontal", "vertical"):
        num, den = (abs(v[1]), abs(v[0])) if cone.kind == "horizontal" \
            else (abs(v[0]), abs(v[1]))
        return num / den if den > 0 else math.inf
    sv = split_vector(mat, v)
    if cone.kind == "stable":
        num = math.sqrt(sv.v_c[0] ** 2 + sv.v_c[1] ** 2 + sv.v_u ** 2)
        den = abs(sv.v_s)
    else:
        num = math.sqrt(sv.v_c[0] ** 2 + sv.v_c[1] ** 2 + sv.v_s ** 2)
        den = abs(sv.v_u)
    return num / den if den > 0 else math.inf


def cone_contains(mat: HyperbolicMatrix, cone: ConeSpec, v: np.ndarray) -> bool:
    return cone_ratio(mat, cone, v) <= cone.size


# ---------------------------------------------------------------------------
# one-step invariance of the stable/unstable cones


@dataclass(frozen=True)
class ConeSweepReport:
    kind: str
    size: float
    n_samples: int
    worst_ratio: float
    passed: bool


def _shear_factors_batch(terms, pts: np.ndarray, vecs: np.ndarray, invert: bool):
    """Apply shear Jacobians to (M,4) vectors at (M,4) point angles in place."""
    pts = pts.copy()
    ordered = tuple(reversed(terms)) if invert else terms
    for term in ordered:
        kvec = np.array(term.freq, dtype=float)
        arg = pts @ kvec + term.phase
        c = term.amp * np.cos(arg)
        if invert:
            c = -c
        vecs[:, term.target] += c * (vecs @ kvec)
        pts[:, term.target] += (-1.0 if invert else 1.0) * term.amp * np.sin(arg)
    return vecs


def _su_ratios(mat: HyperbolicMatrix, vecs: np.ndarray, kind: str) -> np.ndarray:
    v_c, v_s, v_u = split_batch(mat, vecs)
    if kind == "stable":
        return np.sqrt(v_c[:, 0] ** 2 + v_c[:, 1] ** 2 + v_u ** 2) / np.abs(v_s)
    return np.sqrt(v_c[:, 0] ** 2 + v_c[:, 1] ** 2 + v_s ** 2) / np.abs(v_u)


def boundary_vectors(mat: HyperbolicMatrix, cone: ConeSpec, count: int, rng) -> np.ndarray:
    """Random unit vectors on the cone boundary (ratio exactly size)."""
    weak = rng.normal(size=(count, 3))
    weak *= cone.size / np.linalg.norm(weak, axis=1)[:, None]
    strong = np.where(rng.random(count) < 0.5, -1.0, 1.0)
    e_dom = mat.e_s if cone.kind == "stable" else mat.e_u
    e_off = mat.e_u if cone.kind == "stable" else mat.e_s
    vecs = np.zeros((count, 4))
    vecs[:, :2] = weak[:, :2]
    vecs[:, 2:] = strong[:, None] * e_dom + weak[:, 2:3] * e_off
    return vecs / np.linalg.norm(vecs, axis=1)[:, None]


def cone_invariance_sweep(params: MapParams, cone: ConeSpec, n_samples: int,
                          seed: int) -> ConeSweepReport:
    """Worst post-image cone ratio over random points and boundary vectors.

    The unstable cone is pushed by the forward derivative, the stable cone
    by the backward one; strict contraction (every image ratio <= size) is
    the pass condition.
    """
    if cone.kind not in ("stable", "unstable"):
        raise ValueError("invariance sweeps apply to the stable/unstable cones")
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = derive_rng(seed, 31)
    pts = [random_point(rng, params.bits) for _ in range(n_samples)]
    vecs = boundary_vectors(params.matrix, cone, n_samples, rng)
    direction = "forward" if cone.kind == "unstable" else "backward"
    pert = params.perturbation
    if direction == "forward":
        xs = np.array([m.fiber.x for m in pts])
        mats = block_matrices(params, xs, "forward")
        out = np.einsum("nij,nj->ni", mats, vecs)
        if pert is not None:
            # shear Jacobians sit along the partial images, starting from the
            # unperturbed image point
            plain = dataclasses.replace(params, perturbation=None)
            pre = np.array([forward(plain, m).angles() for m in pts])
            out = _shear_factors_batch(pert.terms, pre, out, invert=False)
    else:
        pre_pts = [inverse(params, m) for m in pts]
        if pert is not None:
            cur = np.array([m.angles() for m in pts])
            out = _shear_factors_batch(pert.terms, cur, vecs.copy(), invert=True)
        else:
            out = vecs
        xs = np.array([q.fiber.x for q in pre_pts])
        mats = block_matrices(params, xs, "backward")
        out = np.einsum("nij,nj->ni", mats, out)
    ratios = _su_ratios(params.matrix, out, cone.kind)
    worst = float(ratios.max())
    return ConeSweepReport(kind=cone.kind, size=cone.size, n_samples=n_samples,
                           worst_ratio=worst, passed=bool(worst <= cone.size))


# ---------------------------------------------------------------------------
# center cone expansion


@dataclass(frozen=True)
class ExpansionReport:
    growth: float
    in_cone_after: bool
    passed: bool
    precondition: str | None = None


def check_center_expansion(params: MapParams, m: TorusPoint, v: np.ndarray,
                           theta: float | None = None) -> ExpansionReport:
    """One-step growth and cone containment for a center vector at m.

    Preconditions (m in the good region, v horizontal-cone with no base
    components) are reported in the result rather than raised.
    """
    theta = params.theta() if theta is None else theta
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    pre = None
    if norm == 0.0:
        raise ValueError("cannot measure growth of the zero vector")
    if not in_good_region(params.n, m, "u"):
        pre = "point outside the good region"
    elif np.any(np.abs(v[2:]) > 1e-12 * norm):
        pre = "vector has base components"
    elif abs(v[1]) > theta * abs(v[0]):
        pre = "vector outside the horizontal cone"
    img = derivative(params, m).apply(v)
    growth = float(np.linalg.norm(img) / norm)
    in_cone = bool(abs(img[1]) <= theta * abs(img[0]))
    return ExpansionReport(growth=growth, in_cone_after=in_cone,
                           passed=bool(pre is None and in_cone
                                       and growth > math.sqrt(params.n)),
                           precondition=pre)


@dataclass(frozen=True)
class ExpansionSweepReport:
    n_samples: int
    min_growth: float
    violations: int
    passed: bool


def center_expansion_sweep(params: MapParams, n_samples: int, seed: int,
                           theta: float | None = None) -> ExpansionSweepReport:
    """Batched expansion check at random good points and horizontal vectors."""
    theta = params.theta() if theta is None else theta
    rng = derive_rng(seed, 37)
    half = params.crit_half_width()
    # sample x uniformly on the good set by skipping over the two strips
    xs = rng.random(n_samples) * (TWO_PI - 4.0 * half)
    xs = np.where(xs >= CRIT_CENTERS[0] - half, xs + 2.0 * half, xs)
    xs = np.where(xs >= CRIT_CENTERS[1] - half, xs + 2.0 * half, xs)
    vy = theta * rng.uniform(-1.0, 1.0, n_samples)
    vecs = np.stack([np.ones(n_samples), vy, np.zeros(n_samples),
                     np.zeros(n_samples)], axis=1)
    vecs /= np.linalg.norm(vecs, axis=1)[:, None]
    mats = block_matrices(params, xs, "forward")
    out = np.einsum("nij,nj->ni", mats, vecs)
    pert = params.perturbation
    if pert is not None:
        plain = dataclasses.replace(params, perturbation=None)
        pts = []
        for x in xs:
            q = random_point(rng, params.bits)
            pts.append(TorusPoint(q.fiber._replace(x=float(x)), q.base))
        pre = np.array([forward(plain, m).angles() for m in pts])
        out = _shear_factors_batch(pert.terms, pre, out, invert=False)
    growth = np.linalg.norm(out, axis=1)
    in_cone = np.abs(out[:, 1]) <= theta * np.abs(out[:, 0])
    bad = int(np.count_nonzero(~in_cone | (growth <= math.sqrt(params.n))))
    return ExpansionSweepReport(n_samples=n_samples, min_growth=float(growth.min()),
                                violations=bad, passed=bool(bad == 0))
