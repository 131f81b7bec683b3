"""Pure numpy implementations of the hot kernels.

Mirrors ``_kernels.pyx`` operation for operation. Breakpoint searches use
sequential cumulative sums in both backends; loss totals may differ in the
last bits because numpy sums pairwise.
"""
import numpy as np

NAME = "python"


def tv_dual_rows(p0, v, rho, m, upper, threads=1):
    """Minimize ``h(eta) = sum p0 (eta - v)_+ - eta + rho (eta - m)_+`` per row.

    ``p0`` has shape (R, S). The minimum of the convex piecewise-linear ``h``
    over ``[0, upper]`` is attained at a breakpoint; candidates are
    ``{0, upper, m} U {v_j}`` clipped to the interval and visited in increasing
    order so the first minimizer is the smallest. Returns ``(min_h, eta)``.
    """
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    vs = v[order]
    cand = _candidates(vs, m, upper)
    idx = np.searchsorted(vs, cand, side="left")
    ps = p0[:, order]
    n_rows = p0.shape[0]
    cp = np.zeros((n_rows, vs.size + 1))
    cpv = np.zeros((n_rows, vs.size + 1))
    np.cumsum(ps, axis=1, out=cp[:, 1:])
    np.cumsum(ps * vs, axis=1, out=cpv[:, 1:])
    hinge_m = rho * np.maximum(cand - m, 0.0)
    h = cand * cp[:, idx] - cpv[:, idx] - cand + hinge_m
    k = np.argmin(h, axis=1)
    rows = np.arange(n_rows)
    return h[rows, k], cand[k]


def _candidates(vs, m, upper):
    pts = np.concatenate(([0.0, upper, m], vs))
    pts = pts[(pts >= 0.0) & (pts <= upper)]
    return np.unique(pts)


def group_hinge_argmin(starts, y, w, level, upper):
    """Exact minimizer of ``sum_i w_i (g - y_i)_+ - level * W * g`` per group.

    Atoms of group ``j`` occupy ``y[starts[j]:starts[j+1]]`` sorted ascending.
    The search runs over ``g in [0, upper]``; ties go to the smallest ``g``.
    Returns ``(g, min_value)``.
    """
    n_groups = starts.size - 1
    g_out = np.zeros(n_groups)
    val_out = np.zeros(n_groups)
    for j in range(n_groups):
        lo, hi = starts[j], starts[j + 1]
        ys = y[lo:hi]
        ws = w[lo:hi]
        total = ws.sum()
        cand = np.unique(np.concatenate(([0.0, upper], ys[(ys >= 0.0) & (ys <= upper)])))
        cw = np.zeros(ys.size + 1)
        cwy = np.zeros(ys.size + 1)
        np.cumsum(ws, out=cw[1:])
        np.cumsum(ws * ys, out=cwy[1:])
        idx = np.searchsorted(ys, cand, side="left")
        h = cand * cw[idx] - cwy[idx] - level * total * cand
        k = int(np.argmin(h))
        g_out[j] = cand[k]
        val_out[j] = h[k]
    return g_out, val_out


def hinge_loss_grad(cell, y, w, g_cell, level):
    """Weighted hinge loss and its per-cell subgradient.

    Loss is ``sum_i w_i [(g_{c_i} - y_i)_+ - level * g_{c_i}]``. The hinge
    subgradient at the kink is taken as 0.
    """
    g = g_cell[cell]
    diff = g - y
    active = diff > 0.0
    loss = np.sum(w * (np.where(active, diff, 0.0) - level * g))
    grad = np.bincount(cell, weights=w * (active - level), minlength=g_cell.size)
    return float(loss), grad
