"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np


def brute_force_slots(means, n_slots, rtol=1e-12):
    """Search every boundary tuple for the one the threshold rule should pick.

    Boundary k should reach k/n of the total (deficit 0) as early as possible;
    when no admissible position reaches it, the smallest deficit wins. Keys are
    compared boundary by boundary, so earlier boundaries take precedence.
    """
    T = len(means)
    cum = np.cumsum(means)
    tau = cum[-1] / n_slots
    tol = rtol * cum[-1]

    def key(ends):
        out = []
        for k, e in enumerate(ends, start=1):
            out += [max(0.0, k * tau - tol - cum[e - 1]), e]
        return out

    best = min(itertools.combinations(range(1, T), n_slots - 1), key=key)
    ends = list(best) + [T]
    return tuple(zip([1] + [e + 1 for e in ends[:-1]], ends))
