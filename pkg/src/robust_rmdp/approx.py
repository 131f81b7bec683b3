"""Linear function classes for Q functions and dual variable functions.

Both classes evaluate ``clip(phi(s, a) . w, lo, hi)``. Dataset-driven work is
done on :class:`~robust_rmdp.data.Atoms` (transitions merged by
``(s, a, s')``), so cost scales with distinct transitions, not with N.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from . import _backend
from .core import InvalidModelError, TabularRMDP
from .data import Atoms, Dataset
from .dual import TVBallSpec, apply_Tg, eta_upper


class RankDeficientError(np.linalg.LinAlgError):
    pass


class ErmDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix with one row per state-action cell (row ``s * A + a``).

    ``groups`` is set when every row is a unit basis vector (one-hot and
    indicator tables); such maps partition the cells, which lets the dual
    ERM and the regression be solved in closed form per column.
    """

    matrix: np.ndarray
    n_states: int
    n_actions: int
    kind: str = "custom"
    groups: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != self.n_states * self.n_actions:
            raise InvalidModelError(
                f"feature matrix must have {self.n_states * self.n_actions} rows, got {mat.shape}"
            )
        if not np.all(np.isfinite(mat)):
            raise InvalidModelError("feature matrix has non-finite entries")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        unit = np.all((mat == 0.0) | (mat == 1.0), axis=1) & (mat.sum(axis=1) == 1.0)
        if np.all(unit):
            object.__setattr__(self, "groups", np.argmax(mat, axis=1))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_partition(self) -> bool:
        return self.groups is not None

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "FeatureMap":
        return cls(np.eye(n_states * n_actions), n_states, n_actions, "one-hot")

    @classmethod
    def indicator_table(cls, table) -> "FeatureMap":
        """Cells sharing an integer label share one indicator feature."""
        table = np.asarray(table, dtype=np.int64)
        labels = table.reshape(-1)
        if labels.min() < 0:
            raise InvalidModelError("indicator labels must be >= 0")
        mat = np.zeros((labels.size, labels.max() + 1))
        mat[np.arange(labels.size), labels] = 1.0
        return cls(mat, table.shape[0], table.shape[1], "indicator-table")

    @classmethod
    def constant(cls, n_states: int, n_actions: int) -> "FeatureMap":
        return cls(np.ones((n_states * n_actions, 1)), n_states, n_actions, "constant")

    @classmethod
    def from_spec(cls, spec, n_states: int, n_actions: int) -> "FeatureMap":
        """Build from a config entry: ``{"kind": "one-hot"}``, ``{"kind":
        "indicator-table", "table": [[...]]}``, ``{"kind": "constant"}`` or
        ``{"kind": "custom", "matrix": [[...]]}`` / ``{"kind": "custom",
        "file": path}``."""
        if isinstance(spec, str):
            spec = {"kind": spec}
        kind = spec.get("kind", "one-hot")
        if kind == "one-hot":
            return cls.one_hot(n_states, n_actions)
        if kind == "constant":
            return cls.constant(n_states, n_actions)
        if kind == "indicator-table":
            fmap = cls.indicator_table(spec["table"])
        elif kind == "custom":
            matrix = spec.get("matrix")
            if matrix is None:
                matrix = json.loads(Path(spec["file"]).read_text())
            fmap = cls(matrix, n_states, n_actions, "custom")
        else:
            raise InvalidModelError(f"unknown feature kind {kind!r}")
        if (fmap.n_states, fmap.n_actions) != (n_states, n_actions):
            raise InvalidModelError("feature map shape does not match the model")
        return fmap


@dataclass(frozen=True, eq=False)
class _ClippedLinear:
    features: FeatureMap
    weights: np.ndarray
    clip_lo: float
    clip_hi: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.features.dim,):
            raise InvalidModelError(f"weights shape {w.shape} != ({self.features.dim},)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def raw(self) -> np.ndarray:
        return self.features.matrix @ self.weights

    def table(self) -> np.ndarray:
        fm = self.features
        return np.clip(self.raw(), self.clip_lo, self.clip_hi).reshape(fm.n_states, fm.n_actions)


@dataclass(frozen=True, eq=False)
class LinearQClass(_ClippedLinear):
    """Member of F: values clipped into ``[0, 1/(1-gamma)]``; fail-state rows read 0."""

    fail_state: int | None = None
    gamma: float = 0.0

    @classmethod
    def zeros(cls, features: FeatureMap, gamma: float, fail_state=None) -> "LinearQClass":
        return cls(features, np.zeros(features.dim), 0.0, 1.0 / (1.0 - gamma), fail_state, gamma)

    def with_weights(self, weights) -> "LinearQClass":
        return LinearQClass(
            self.features, weights, self.clip_lo, self.clip_hi, self.fail_state, self.gamma
        )

    def table(self) -> np.ndarray:
        q = super().table()
        if self.fail_state is not None:
            q[self.fail_state] = 0.0
        return q


@dataclass(frozen=True, eq=False)
class LinearDualClass(_ClippedLinear):
    """Member of G: values clipped into ``[0, 2/(rho(1-gamma))]``."""

    rho: float = 0.0

    @classmethod
    def zeros(cls, features: FeatureMap, rho: float, gamma: float) -> "LinearDualClass":
        if rho <= 0.0:
            raise InvalidModelError("dual functions need rho > 0")
        return cls(features, np.zeros(features.dim), 0.0, eta_upper(rho, gamma), rho)

    def with_weights(self, weights) -> "LinearDualClass":
        return LinearDualClass(self.features, weights, self.clip_lo, self.clip_hi, self.rho)


def _table(x) -> np.ndarray:
    return x.table() if hasattr(x, "table") else np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# dual loss


def dual_loss_empirical(g, f, dataset: Dataset, rho: float) -> float:
    """Sample average of ``(g(s,a) - max_a' f(s',a'))_+ - (1 - rho) g(s,a)``.

    Transitions carry weights (1 for sampled data); the average is weighted.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    g_tab, v = _table(g), _table(f).max(axis=1)
    gi = g_tab[dataset.s, dataset.a]
    terms = np.maximum(gi - v[dataset.s_next], 0.0) - (1.0 - rho) * gi
    return float(np.sum(dataset.w * terms) / np.sum(dataset.w))


def dual_loss_population(g, f, rmdp: TabularRMDP, mu, rho: float) -> float:
    """Exact expectation of the dual loss under ``mu`` and the nominal kernel."""
    g_tab, v = _table(g), _table(f).max(axis=1)
    hinge = np.einsum("sat,sat->sa", rmdp.kernel, np.maximum(g_tab[:, :, None] - v, 0.0))
    return float(np.sum(np.asarray(mu) * (hinge - (1.0 - rho) * g_tab)))


def pointwise_dual_minimum(f, rmdp: TabularRMDP, mu, rho: float) -> float:
    """``E_mu[min_eta (E_P0[(eta - V)_+] - (1 - rho) eta)]``, the best any g can do."""
    v = _table(f).max(axis=1)
    spec = TVBallSpec(rho, use_fail_state_reduction=True)
    n_s, n_a, _ = rmdp.kernel.shape
    rows = rmdp.kernel.reshape(n_s * n_a, -1)
    h, _ = _backend.kernels.tv_dual_rows(rows, v, spec.rho, 0.0, eta_upper(rho, rmdp.gamma), 1)
    return float(np.sum(np.asarray(mu).reshape(-1) * h))


@dataclass
class ErmOptions:
    steps: int = 3000
    step_scale: float = 0.1
    tol: float = 1e-6
    patience: int = 500
    method: str = "auto"  # auto | exact | subgradient | lp
    warm_start: bool = True

    @classmethod
    def from_dict(cls, doc: dict | None) -> "ErmOptions":
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidModelError(f"unknown erm options: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ErmReport:
    final_weights: np.ndarray
    empirical_loss: float
    iterations: int
    step_size_schedule: str
    loss_trace: list[float]
    method: str
    chunk_size: int | None = None


def _atom_targets(atoms: Atoms, f) -> np.ndarray:
    return _table(f).max(axis=1)[atoms.s_next]


def erm_dual(
    dataset: Dataset | Atoms,
    f,
    gclass: LinearDualClass,
    opts: ErmOptions | None = None,
) -> tuple[LinearDualClass, ErmReport]:
    """Approximately minimize the empirical dual loss over the class of ``gclass``.

    ``method="auto"`` solves partition features exactly (each column is a
    weighted-quantile problem) and uses projected subgradient descent with
    step ``step_scale * hi / sqrt(t)`` and suffix averaging otherwise.
    ``method="lp"`` solves the convex problem restricted to unclipped weights
    as a linear program.
    """
    opts = opts or ErmOptions()
    atoms = dataset.atoms() if isinstance(dataset, Dataset) else dataset
    if atoms.cell.size == 0:
        raise ValueError("empty dataset")
    y = _atom_targets(atoms, f)
    level = 1.0 - gclass.rho
    method = opts.method
    if method == "auto":
        method = "exact" if gclass.features.is_partition else "subgradient"
    if method == "exact":
        return _erm_exact(atoms, y, gclass, level)
    if method == "subgradient":
        return _erm_subgradient(atoms, y, gclass, level, opts)
    if method == "lp":
        return _erm_lp(atoms, y, gclass, level)
    raise InvalidModelError(f"unknown ERM method {opts.method!r}")


def _loss_from_weights(atoms, y, gclass, level, weights) -> float:
    g_cell = np.clip(gclass.features.matrix @ weights, gclass.clip_lo, gclass.clip_hi)
    loss, _ = _backend.kernels.hinge_loss_grad(atoms.cell, y, atoms.w, g_cell, level)
    return loss / atoms.total_weight


def _erm_exact(atoms, y, gclass, level):
    fm = gclass.features
    if not fm.is_partition:
        raise InvalidModelError("exact ERM needs partition (one-hot or indicator) features")
    grp = fm.groups[atoms.cell]
    order = np.lexsort((y, grp))
    counts = np.bincount(grp, minlength=fm.dim)
    starts = np.concatenate(([0], np.cumsum(counts)))
    g, _ = _backend.kernels.group_hinge_argmin(
        starts, y[order], atoms.w[order], level, gclass.clip_hi
    )
    g = np.clip(g, gclass.clip_lo, gclass.clip_hi)
    loss = _loss_from_weights(atoms, y, gclass, level, g)
    report = ErmReport(g.copy(), loss, 1, "exact per-column breakpoint search", [loss], "exact")
    return gclass.with_weights(g), report


def _erm_subgradient(atoms, y, gclass, level, opts):
    fm = gclass.features
    phi = fm.matrix
    lo, hi = gclass.clip_lo, gclass.clip_hi
    total = atoms.total_weight
    w = gclass.weights.copy() if opts.warm_start else np.zeros(fm.dim)
    w_avg, n_avg = w.copy(), 1
    best_w, best_loss = w.copy(), np.inf
    trace = []
    prev_loss, rising = np.inf, 0
    k = 0
    for k in range(1, opts.steps + 1):
        pred = phi @ w
        g_cell = np.clip(pred, lo, hi)
        loss, grad_cell = _backend.kernels.hinge_loss_grad(atoms.cell, y, atoms.w, g_cell, level)
        loss /= total
        grad_cell /= total
        # clipped cells have zero gradient unless the step moves them back inside
        grad_cell[(pred <= lo) & (grad_cell > 0.0)] = 0.0
        grad_cell[(pred >= hi) & (grad_cell < 0.0)] = 0.0
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_w = loss, w.copy()
        rising = rising + 1 if loss > prev_loss + opts.tol else 0
        if rising >= opts.patience:
            raise ErmDivergenceError(f"dual loss rose for {rising} consecutive steps at step {k}")
        prev_loss = loss
        grad = phi.T @ grad_cell
        norm = np.linalg.norm(grad)
        if norm <= opts.tol * 1e-3:
            break
        w = w - (opts.step_scale * hi / np.sqrt(k)) * grad / norm
        # suffix averaging: restart at powers of two so the average covers the last half
        if k & (k - 1) == 0:
            w_avg, n_avg = w.copy(), 1
        else:
            n_avg += 1
            w_avg += (w - w_avg) / n_avg
    avg_loss = _loss_from_weights(atoms, y, gclass, level, w_avg)
    final = w_avg if avg_loss <= best_loss else best_w
    final_loss = min(avg_loss, best_loss)
    report = ErmReport(
        final.copy(), final_loss, k,
        f"normalized subgradient, step {opts.step_scale} * {hi:.6g} / sqrt(t), suffix averaging",
        trace, "subgradient",
    )
    return gclass.with_weights(final), report


def _erm_lp(atoms, y, gclass, level):
    """min_w sum_j W_j t_j - level sum_c W_c phi_c w, t_j >= phi_{c_j} w - y_j, t >= 0,
    lo <= phi_c w <= hi on every cell."""
    phi = gclass.features.matrix
    d, n_atoms = phi.shape[1], atoms.cell.size
    total = atoms.total_weight
    wc = atoms.cell_weights() / total
    c = np.concatenate((-level * (phi.T @ wc), atoms.w / total))
    a_hinge = np.hstack((phi[atoms.cell], -np.eye(n_atoms)))
    a_range = np.hstack((np.vstack((phi, -phi)), np.zeros((2 * phi.shape[0], n_atoms))))
    b = np.concatenate((y, np.full(phi.shape[0], gclass.clip_hi), np.full(phi.shape[0], -gclass.clip_lo)))
    bounds = [(None, None)] * d + [(0.0, None)] * n_atoms
    res = linprog(c, A_ub=np.vstack((a_hinge, a_range)), b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise ErmDivergenceError(f"dual LP failed: {res.message}")
    w = res.x[:d]
    loss = _loss_from_weights(atoms, y, gclass, level, w)
    report = ErmReport(w.copy(), loss, int(getattr(res, "nit", 0)), "HiGHS linear program", [loss], "lp")
    return gclass.with_weights(w), report


# ---------------------------------------------------------------------------
# least squares


def fit_targets(atoms: Atoms, shift: np.ndarray, fclass: LinearQClass, ridge: float):
    """Ridge least squares on targets ``y_i = r_i + shift[atom_i]``.

    Returns ``(f, mean squared residual of unclipped predictions)``.
    """
    if atoms.cell.size == 0:
        raise ValueError("empty dataset")
    if ridge < 0.0:
        raise ValueError("ridge must be >= 0")
    fm = fclass.features
    n_cells = fm.n_states * fm.n_actions
    wc = atoms.cell_weights()
    by = np.bincount(atoms.cell, weights=atoms.wr + atoms.w * shift, minlength=n_cells)
    if fm.is_partition:
        gw = np.bincount(fm.groups, weights=wc, minlength=fm.dim)
        gb = np.bincount(fm.groups, weights=by, minlength=fm.dim)
        denom = gw + ridge
        if np.any(denom == 0.0):
            raise RankDeficientError("feature columns with no data and ridge = 0")
        weights = gb / denom
    else:
        phi = fm.matrix
        gram = phi.T @ (wc[:, None] * phi) + ridge * np.eye(fm.dim)
        rhs = phi.T @ by
        try:
            chol = scipy.linalg.cho_factor(gram)
        except np.linalg.LinAlgError:
            chol = None
        pivots = None if chol is None else np.abs(np.diag(chol[0]))
        if pivots is None or pivots.min() <= 1e-7 * pivots.max():
            raise RankDeficientError("normal equations are singular; use ridge > 0")
        weights = scipy.linalg.cho_solve(chol, rhs)
    pred = (fm.matrix @ weights)[atoms.cell]
    e = pred - shift
    sq = atoms.w * e * e - 2.0 * e * atoms.wr + atoms.wr2
    residual = max(float(sq.sum()) / atoms.total_weight, 0.0)
    return fclass.with_weights(weights), residual


def robust_targets_shift(atoms: Atoms, f_prev, g, gamma: float, rho: float) -> np.ndarray:
    """Per-atom part of the robust regression target, ``y_i - r_i``."""
    v = _table(f_prev).max(axis=1)[atoms.s_next]
    gi = _table(g).reshape(-1)[atoms.cell]
    return -gamma * np.maximum(gi - v, 0.0) + gamma * (1.0 - rho) * gi


def least_squares_q(
    dataset: Dataset | Atoms,
    f_prev,
    g,
    fclass: LinearQClass,
    ridge: float = 1e-8,
    rho: float | None = None,
) -> tuple[LinearQClass, float]:
    """Regress ``r - gamma (g - max f_prev(s'))_+ + gamma (1 - rho) g`` on the features.

    Targets are not clipped. ``rho`` defaults to ``g.rho``.
    """
    atoms = dataset.atoms() if isinstance(dataset, Dataset) else dataset
    if rho is None:
        rho = g.rho
    shift = robust_targets_shift(atoms, f_prev, g, fclass.gamma, rho)
    return fit_targets(atoms, shift, fclass, ridge)


def apply_Tg_exact(f, g, rmdp: TabularRMDP, rho: float) -> np.ndarray:
    """Population version of the regression target (see :func:`dual.apply_Tg`)."""
    return apply_Tg(_table(f), _table(g), rmdp, TVBallSpec(rho, use_fail_state_reduction=True))
