"""Coordinates and linear algebra on T^4 = T^2 x T^2.

Fiber coordinates are angle pairs in [0, 2*pi).  Base coordinates are kept
as exact fixed-point fractions of the full turn so that long products of an
integer hyperbolic matrix act on them without any rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import mpmath
import numpy as np

TWO_PI = 2.0 * math.pi

DEFAULT_MATRIX = ((2, 1), (1, 1))
DEFAULT_BITS = 512
MIN_BITS = 128


def reduce_angle(t: float) -> float:
    """Reduce a real angle to the fundamental interval [0, 2*pi)."""
    if not math.isfinite(t):
        raise ValueError(f"angle must be finite, got {t!r}")
    r = math.fmod(t, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    if r >= TWO_PI:  # fmod can land exactly on 2*pi after the wrap
        r -= TWO_PI
    return r


def circle_dist(a: float, b: float) -> float:
    """Shortest distance between two angles on the circle of length 2*pi."""
    d = abs(reduce_angle(a) - reduce_angle(b))
    return min(d, TWO_PI - d)


class FiberPoint(NamedTuple):
    x: float
    y: float

    def reduced(self) -> "FiberPoint":
        return FiberPoint(reduce_angle(self.x), reduce_angle(self.y))


def _fraction_to_numerator(f: Fraction, bits: int) -> int:
    # round to nearest B-bit fraction of the turn, ties away from zero
    scaled = f * (1 << bits)
    num = scaled.numerator
    den = scaled.denominator
    q, r = divmod(abs(num), den)
    if 2 * r >= den:
        q += 1
    if num < 0:
        q = -q
    return q % (1 << bits)


def mpf_to_fraction(x) -> Fraction:
    """Exact rational value of an mpmath float (binary floats are rationals)."""
    if isinstance(x, (int, float, Fraction)):
        return Fraction(x)
    sign, man, exp, _ = x._mpf_
    if man == 0:
        return Fraction(0)
    val = Fraction(man)
    val = val * (1 << exp) if exp >= 0 else val / (1 << -exp)
    return -val if sign else val


@dataclass(frozen=True)
class BasePoint:
    """Point of the base torus stored as B-bit fixed-point fractions of a turn.

    nu/2^bits and nv/2^bits are the two coordinates in [0, 1).  All dynamics
    on the base reduces to integer matrix action mod 2^bits, hence is exact.
    """

    nu: int
    nv: int
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if self.bits < MIN_BITS:
            raise ValueError(f"bits must be >= {MIN_BITS}, got {self.bits}")
        mod = 1 << self.bits
        if not (0 <= self.nu < mod and 0 <= self.nv < mod):
            raise ValueError("numerators out of range for bit width")

    @classmethod
    def from_fractions(cls, u, v, bits: int = DEFAULT_BITS) -> "BasePoint":
        u = Fraction(u) % 1
        v = Fraction(v) % 1
        return cls(_fraction_to_numerator(u, bits), _fraction_to_numerator(v, bits), bits)

    @classmethod
    def from_angles(cls, z: float, w: float, bits: int = DEFAULT_BITS) -> "BasePoint":
        return cls.from_fractions(Fraction(reduce_angle(z)) / Fraction(TWO_PI),
                                  Fraction(reduce_angle(w)) / Fraction(TWO_PI), bits)

    def fractions(self) -> tuple[Fraction, Fraction]:
        mod = 1 << self.bits
        return Fraction(self.nu, mod), Fraction(self.nv, mod)

    def angles(self) -> tuple[float, float]:
        mod = float(1 << self.bits)
        return (float(self.nu) / mod) * TWO_PI, (float(self.nv) / mod) * TWO_PI

    def angles_mp(self, prec: int):
        with mpmath.workprec(prec):
            scale = mpmath.ldexp(2 * mpmath.pi, -self.bits)
            return mpmath.mpf(self.nu) * scale, mpmath.mpf(self.nv) * scale

    def apply_int_matrix(self, m: tuple[tuple[int, int], tuple[int, int]]) -> "BasePoint":
        mod = 1 << self.bits
        return BasePoint((m[0][0] * self.nu + m[0][1] * self.nv) % mod,
                         (m[1][0] * self.nu + m[1][1] * self.nv) % mod, self.bits)

    def add_offsets(self, du, dv) -> "BasePoint":
        """Translate by (du, dv) turns; offsets may be float, Fraction or mpf."""
        mod = 1 << self.bits
        ddu = _fraction_to_numerator(mpf_to_fraction(du) % 1, self.bits)
        ddv = _fraction_to_numerator(mpf_to_fraction(dv) % 1, self.bits)
        return BasePoint((self.nu + ddu) % mod, (self.nv + ddv) % mod, self.bits)

    def rebit(self, bits: int) -> "BasePoint":
        if bits == self.bits:
            return self
        if bits > self.bits:
            shift = bits - self.bits
            return BasePoint(self.nu << shift, self.nv << shift, bits)
        shift = self.bits - bits
        half = 1 << (shift - 1)
        mod = 1 << bits
        return BasePoint(((self.nu + half) >> shift) % mod,
                         ((self.nv + half) >> shift) % mod, bits)


@dataclass(frozen=True)
class TorusPoint:
    """Point of T^4: double-precision fiber plus exact base.

    hp optionally carries the fiber at extended precision as
    (x: mpf, y: mpf, prec: int); orbit evaluators use it when present so that
    long itineraries remain meaningful beyond double precision.
    """

    fiber: FiberPoint
    base: BasePoint
    hp: tuple | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_angles(cls, x: float, y: float, z: float, w: float,
                    bits: int = DEFAULT_BITS) -> "TorusPoint":
        return cls(FiberPoint(reduce_angle(x), reduce_angle(y)),
                   BasePoint.from_angles(z, w, bits))

    def angles(self) -> tuple[float, float, float, float]:
        z, w = self.base.angles()
        return (self.fiber.x, self.fiber.y, z, w)

    def with_bits(self, bits: int) -> "TorusPoint":
        return TorusPoint(self.fiber, self.base.rebit(bits), self.hp)


def torus_dist(p: TorusPoint, q: TorusPoint) -> float:
    """Euclidean distance on T^4, minimized over the 2*pi lattice."""
    pa, qa = p.angles(), q.angles()
    return math.sqrt(sum(circle_dist(a, b) ** 2 for a, b in zip(pa, qa)))


def fiber_dist(p: FiberPoint, q: FiberPoint) -> float:
    return math.hypot(circle_dist(p.x, q.x), circle_dist(p.y, q.y))


# ---------------------------------------------------------------------------
# hyperbolic integer matrices


def _validate_entries(entries) -> tuple[tuple[int, int], tuple[int, int]]:
    try:
        (a, b), (c, d) = entries
    except (TypeError, ValueError) as exc:
        raise ValueError("matrix must be a 2x2 nest of integers") from exc
    for v in (a, b, c, d):
        if not isinstance(v, (int, np.integer)):
            raise ValueError(f"matrix entries must be integers, got {v!r}")
    return (int(a), int(b)), (int(c), int(d))


def mat2_mul(m, n):
    return ((m[0][0] * n[0][0] + m[0][1] * n[1][0], m[0][0] * n[0][1] + m[0][1] * n[1][1]),
            (m[1][0] * n[0][0] + m[1][1] * n[1][0], m[1][0] * n[0][1] + m[1][1] * n[1][1]))


def mat2_adjugate(m):
    # exact inverse of a determinant-one integer matrix
    return ((m[1][1], -m[0][1]), (-m[1][0], m[0][0]))


_IDENTITY = ((1, 0), (0, 1))
_POWER_CACHE: dict[tuple, tuple] = {}


def mat2_power(entries, k: int):
    """Exact k-th power (k of either sign) of a determinant-one matrix."""
    entries = _validate_entries(entries)
    key = (entries, k)
    hit = _POWER_CACHE.get(key)
    if hit is not None:
        return hit
    base = entries if k >= 0 else mat2_adjugate(entries)
    n = abs(k)
    result = _IDENTITY
    while n:
        if n & 1:
            result = mat2_mul(result, base)
        base = mat2_mul(base, base)
        n >>= 1
    _POWER_CACHE[key] = result
    return result


@dataclass(frozen=True)
class HyperbolicMatrix:
    """Integer SL(2,Z) matrix with trace > 2 plus its eigen data.

    lam and mu are the eigenvalues with 0 < lam < 1 < mu and lam*mu = 1.
    e_s and e_u are unit eigenvectors with positive first component.
    """

    entries: tuple[tuple[int, int], tuple[int, int]]
    lam: float
    mu: float
    # derived data: identity (equality, hashing) rests on the exact entries
    e_s: np.ndarray = field(compare=False)
    e_u: np.ndarray = field(compare=False)

    def power(self, k: int):
        return mat2_power(self.entries, k)

    def array(self) -> np.ndarray:
        return np.array(self.entries, dtype=float)

    def unit_vectors_mp(self, prec: int):
        """(e_u, e_s) recomputed at mp precision, same sign convention."""
        (a, b), (c, d) = self.entries
        with mpmath.workprec(prec):
            tr = mpmath.mpf(a + d)
            root = mpmath.sqrt(tr * tr - 4)
            mu = (tr + root) / 2
            lam = 1 / mu
            eu = _unit_mp(b, mu - a, c, mu - d)
            es = _unit_mp(b, lam - a, c, lam - d)
            return eu, es


def _unit_mp(b, comp, c, alt_comp):
    if b != 0:
        vx, vy = mpmath.mpf(b), comp
    else:
        vx, vy = alt_comp, mpmath.mpf(c)
    norm = mpmath.sqrt(vx * vx + vy * vy)
    vx, vy = vx / norm, vy / norm
    if vx < 0 or (vx == 0 and vy < 0):
        vx, vy = -vx, -vy
    return vx, vy


def eigen_data(entries=DEFAULT_MATRIX) -> HyperbolicMatrix:
    """Validate an integer matrix and attach eigenvalues and eigenvectors.

    Requires determinant one and trace > 2.  Matrices with trace < -2 are
    hyperbolic but have negative eigenvalues, which the 0 < lam < 1 < mu
    convention cannot represent; they are rejected with a hint.
    """
    entries = _validate_entries(entries)
    (a, b), (c, d) = entries
    det = a * d - b * c
    if det != 1:
        raise ValueError(f"matrix must have determinant 1, got {det}")
    tr = a + d
    if tr <= -2:
        raise ValueError(f"trace {tr} < -2: eigenvalues are negative; use the negated matrix")
    if tr <= 2:
        raise ValueError(f"matrix must be hyperbolic (|trace| > 2), got trace {tr}")
    mu = (tr + math.sqrt(tr * tr - 4.0)) / 2.0
    lam = 1.0 / mu
    e_u = _unit_vector(b, mu - a, c, mu - d)
    e_s = _unit_vector(b, lam - a, c, lam - d)
    e_u.setflags(write=False)
    e_s.setflags(write=False)
    return HyperbolicMatrix(entries, lam, mu, e_s, e_u)


def _unit_vector(b, comp, c, alt_comp) -> np.ndarray:
    # (b, eig - a) solves the eigenvector equation; b = 0 cannot occur for a
    # hyperbolic det-1 integer matrix but fall back to the second row anyway
    v = np.array([float(b), comp]) if b != 0 else np.array([alt_comp, float(c)])
    v = v / np.linalg.norm(v)
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    return v


def base_apply_power(mat: HyperbolicMatrix, k: int, b: BasePoint) -> BasePoint:
    """Apply the exact k-th matrix power to a base point (k of either sign)."""
    return b.apply_int_matrix(mat2_power(mat.entries, k))


# ---------------------------------------------------------------------------
# splitting R^4 = E^c + E^s_A + E^u_A

Vec4 = np.ndarray


@dataclass(frozen=True)
class SplitVector:
    """Tangent vector in center / stable / unstable coordinates."""

    v_c: np.ndarray
    v_s: float
    v_u: float


def split_vector(mat: HyperbolicMatrix, v: Vec4) -> SplitVector:
    """Coordinates of v in E^c + E^s_A + E^u_A (exact 2x2 eigenbasis solve)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (4,):
        raise ValueError(f"expected a 4-vector, got shape {v.shape}")
    es, eu = mat.e_s, mat.e_u
    det = es[0] * eu[1] - es[1] * eu[0]
    vs = (v[2] * eu[1] - v[3] * eu[0]) / det
    vu = (es[0] * v[3] - es[1] * v[2]) / det
    return SplitVector(v_c=v[:2].copy(), v_s=float(vs), v_u=float(vu))


def recompose(mat: HyperbolicMatrix, sv: SplitVector) -> Vec4:
    tail = sv.v_s * mat.e_s + sv.v_u * mat.e_u
    return np.concatenate([np.asarray(sv.v_c, dtype=float), tail])


def split_batch(mat: HyperbolicMatrix, vs: np.ndarray):
    """Vectorized split of an (n, 4) array: returns (v_c (n,2), v_s, v_u)."""
    es, eu = mat.e_s, mat.e_u
    det = es[0] * eu[1] - es[1] * eu[0]
    v_s = (vs[:, 2] * eu[1] - vs[:, 3] * eu[0]) / det
    v_u = (es[0] * vs[:, 3] - es[1] * vs[:, 2]) / det
    return vs[:, :2], v_s, v_u


def _random_numerator(rng, bits: int) -> int:
    # 30-bit words; surplus high bits folded away by the power-of-two modulus,
    # so the result is exactly uniform on [0, 2^bits)
    words = rng.integers(0, 1 << 30, size=(bits + 29) // 30)
    val = 0
    for w in words:
        val = (val << 30) | int(w)
    return val % (1 << bits)


def random_point(rng, bits: int = DEFAULT_BITS) -> TorusPoint:
    """Uniform random point of T^4 (exact uniform base numerators)."""
    fiber = FiberPoint(rng.uniform(0.0, TWO_PI), rng.uniform(0.0, TWO_PI))
    base = BasePoint(_random_numerator(rng, bits), _random_numerator(rng, bits), bits)
    return TorusPoint(fiber, base)
