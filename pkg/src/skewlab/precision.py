"""Working-precision budgets and deterministic random streams.

Backward orbit segments lose about [2N]*log2(mu) bits of fiber accuracy per
step when re-run forward (the strong unstable rate), while plain fiber chains
over an exact base lose only a handful of bits per step.  The helpers here
centralize those budgets so callers do not re-derive them.
"""

from __future__ import annotations

import math

import numpy as np

GUARD_BITS = 96


def strong_unstable_prec(n_int: int, mu: float, depth: int, guard: int = GUARD_BITS) -> int:
    """Bits needed to survive `depth` steps of the strong unstable cocycle."""
    per_step = n_int * math.log2(mu)
    return max(128, int(math.ceil(depth * per_step)) + guard)


def center_chain_prec(n_param: float, depth: int, guard: int = 128) -> int:
    """Bits for a fiber chain of `depth` steps over an exact base orbit.

    The fiber cocycle grows at most like (2*n_param + 3) per step, so the
    loss is logarithmic per step rather than proportional to the base rate.
    """
    per_step = math.log2(2.0 * max(n_param, 1.0) + 3.0)
    return max(128, int(math.ceil(depth * per_step)) + guard)


def derive_rng(seed: int, *indices: int) -> np.random.Generator:
    """Counter-style generator: same (seed, indices) always gives same stream."""
    return np.random.default_rng(np.random.SeedSequence((seed,) + tuple(indices)))
