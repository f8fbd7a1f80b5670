"""Shared test utilities."""

import numpy as np

from cicd.logits import LogitVector, js_divergence, softmax


def boundary_pair(target):
    """Vocab-3 logit pair whose log10(jsd) lands on ``target``.

    Bisects the dominant entry, then fine-scans a low-probability third
    entry (which perturbs the normalization in much smaller steps) until
    the computed log10 equals the target double exactly; falls back to the
    nearest representable hit. Returns (x, c, achieved_log10).
    """
    def log10_of(x, c):
        a = LogitVector(np.array([x, 0.0, c]))
        b = LogitVector(np.array([0.0, 0.0, c]))
        return js_divergence(softmax(a), softmax(b)).log10_jsd

    lo, hi = 1e-8, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if log10_of(mid, -13.0) < target:
            lo = mid
        else:
            hi = mid
    best = None
    for x in (lo, hi):
        for k in range(4000):
            c = -13.0 - k * 5e-10
            value = log10_of(x, c)
            if value == target:
                return x, c, value
            if best is None or abs(value - target) < abs(best[2] - target):
                best = (x, c, value)
    return best
