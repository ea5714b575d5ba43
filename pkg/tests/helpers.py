"""Independent oracles shared by the test modules."""

import numpy as np


def fd_rel_error(model, dirs, upstream, h=1e-4):
    """Worst relative gap between analytic and central-difference gradients.

    Relative to ``max(|analytic|, |numeric|, 1)`` per coordinate.
    """
    v = model.vector()
    g = model.grad(dirs, upstream)

    def E(vec):
        return float(np.sum(upstream * model.with_vector(vec).evaluate(dirs)))

    worst = 0.0
    for i in range(v.size):
        vp = v.copy()
        vm = v.copy()
        vp[i] += h
        vm[i] -= h
        num = (E(vp) - E(vm)) / (2 * h)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1.0))
    return worst


def brute_softmax(logits):
    e = np.exp(logits - logits.max())
    return e / e.sum()


def nearest_site(unit_sites, dirs):
    return np.argmax(dirs @ unit_sites.T, axis=1)


def boundary_margin_deg(unit_sites, dirs):
    """Angular distance (degrees) of each dir from its cell's nearest bisector plane."""
    dots = dirs @ unit_sites.T
    k = np.argmax(dots, axis=1)
    margin = np.full(len(dirs), np.inf)
    for j in range(unit_sites.shape[0]):
        n = unit_sites[k] - unit_sites[j]
        norm = np.linalg.norm(n, axis=1)
        ok = norm > 0
        s = np.abs(np.sum(dirs[ok] * n[ok], axis=1)) / norm[ok]
        margin[ok] = np.minimum(margin[ok], np.degrees(np.arcsin(np.clip(s, 0, 1))))
    return margin
