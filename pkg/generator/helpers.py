"""Support functions for synthetic data generation."""

import numpy as np

REGIMES = ("terminal", "distributed", "sparse")


def unit_vector(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def quality_geometry(d, seed):
    """Quality direction u and one prompt-signature direction per regime.

    Everything is drawn from `seed` in a fixed order, so datasets that
    share the seed share the geometry whatever their regime.
    """

    rng = np.random.default_rng([seed, d])
    u = unit_vector(rng, d)
    signatures = {regime: unit_vector(rng, d) for regime in REGIMES}
    return u, signatures


def sample_length(rng, bounds):
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def injection_weights(regime, length, rng):
    """Share of the signal each response token receives (sums to 1)."""

    weights = np.zeros(length)
    if regime == "terminal":
        weights[-1] = 1.0
    elif regime == "distributed":
        weights[:] = 1.0 / length
    elif regime == "sparse":
        weights[int(rng.integers(0, length - 1))] = 1.0
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return weights
