"""Inner minimization over a total-variation ball and robust Bellman operators.

Two independent routes compute ``inf { E_P[v] : (1/2)||P - p0||_1 <= rho }``:

* :func:`tv_inner_inf_primal` moves probability mass directly (greedy
  transport). It is the oracle and never touches the kernel backend.
* :func:`tv_inner_inf_dual` minimizes the scalar convex piecewise-linear dual
  ``h(eta) = E_p0[(eta - v)_+] - eta + rho (eta - m)_+`` over
  ``eta in [0, 2 / (rho (1 - gamma))]`` by enumerating breakpoints.

The operators below all go through the dual route.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import InvalidModelError, Policy, TabularRMDP, state_values

DIST_TOL = 1e-10
RANGE_TOL = 1e-9


@dataclass(frozen=True)
class TVBallSpec:
    """Radius of the TV ball and whether ``inf V`` is replaced by 0.

    The replacement is exact when the model has a fail state whose value is
    pinned at 0.
    """

    rho: float
    use_fail_state_reduction: bool = False

    def __post_init__(self):
        if not np.isfinite(self.rho) or self.rho < 0.0:
            raise ValueError(f"rho must be finite and >= 0, got {self.rho}")

    @classmethod
    def for_rmdp(cls, rmdp: TabularRMDP, rho: float | None = None) -> "TVBallSpec":
        return cls(
            rho=rmdp.rho if rho is None else float(rho),
            use_fail_state_reduction=rmdp.fail_state is not None,
        )


@dataclass(frozen=True)
class DualSolution:
    value: float
    eta_star: float
    eta_upper: float


def eta_upper(rho: float, gamma: float) -> float:
    if rho <= 0.0:
        return np.inf
    return 2.0 / (rho * (1.0 - gamma))


def search_upper(rho: float, gamma: float) -> float:
    """Breakpoint search interval end.

    The minimizer of ``h`` never exceeds ``max v <= 1/(1-gamma)``, which the
    ``eta_upper`` bound only covers for ``rho <= 2``; beyond that the interval
    is widened so the dual stays exact on the full simplex.
    """
    return max(eta_upper(rho, gamma), 1.0 / (1.0 - gamma))


def _check_distribution(p0) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    if p0.ndim != 1 or p0.size == 0:
        raise InvalidModelError("p0 must be a non-empty 1-D probability vector")
    if np.any(p0 < 0.0) or abs(p0.sum() - 1.0) > DIST_TOL:
        raise InvalidModelError(f"p0 is not a distribution (sum={p0.sum():.17g})")
    return p0


def tv_inner_inf_primal(p0, v, rho: float) -> tuple[float, np.ndarray]:
    """Worst-case expectation of ``v`` over the TV ball, solved in the primal.

    Removes up to ``rho`` mass from the highest-valued states (ties: lowest
    index first) and deposits it on the lowest-index minimizer of ``v``.
    Returns the value and the achieving distribution.
    """
    p0 = _check_distribution(p0)
    v = np.asarray(v, dtype=float)
    if v.shape != p0.shape or not np.all(np.isfinite(v)):
        raise InvalidModelError("v must be finite and match p0 in length")
    if rho < 0.0:
        raise InvalidModelError(f"rho must be >= 0, got {rho}")

    target = int(np.argmin(v))
    worst = p0.copy()
    if rho >= 1.0:
        worst[:] = 0.0
        worst[target] = 1.0
        return float(v[target]), worst

    budget = float(rho)
    # decreasing v, lowest index first among ties
    for s in sorted(range(v.size), key=lambda i: (-v[i], i)):
        if budget <= 0.0 or v[s] <= v[target]:
            break
        take = min(worst[s], budget)
        worst[s] -= take
        worst[target] += take
        budget -= take
    value = sum(float(worst[i]) * float(v[i]) for i in range(v.size))
    return value, worst


def tv_inner_inf_dual(p0, v, spec: TVBallSpec, gamma: float) -> DualSolution:
    """Worst-case expectation through the scalar dual.

    With ``spec.use_fail_state_reduction`` the hinge anchor ``m`` is 0
    instead of ``min(v)``.
    """
    p0 = _check_distribution(p0)
    v = np.asarray(v, dtype=float)
    if v.shape != p0.shape:
        raise InvalidModelError("v must match p0 in length")
    if spec.rho <= 0.0:
        raise InvalidModelError("the dual needs rho > 0 (its eta bound is infinite at rho = 0)")
    _check_value_range(v, gamma)
    m = 0.0 if spec.use_fail_state_reduction else float(v.min())
    h, eta = _backend.kernels.tv_dual_rows(
        p0[None, :], v, spec.rho, m, search_upper(spec.rho, gamma), 1
    )
    return DualSolution(
        value=-float(h[0]), eta_star=float(eta[0]), eta_upper=search_upper(spec.rho, gamma)
    )


def dual_objective(eta, p0, v, rho: float, m: float):
    """``h(eta)``; vectorized over ``eta`` for plotting and tests."""
    eta = np.asarray(eta, dtype=float)[..., None]
    return (
        np.sum(p0 * np.maximum(eta - v, 0.0), axis=-1)
        - eta[..., 0]
        + rho * np.maximum(eta[..., 0] - m, 0.0)
    )


def _check_value_range(v, gamma):
    hi = 1.0 / (1.0 - gamma)
    if not np.all(np.isfinite(v)) or v.min() < -RANGE_TOL or v.max() > hi + RANGE_TOL:
        raise InvalidModelError(
            f"values must lie in [0, {hi:.6g}] for the dual bound to hold, "
            f"got [{np.min(v):.6g}, {np.max(v):.6g}]"
        )


def inner_inf_table(kernel: np.ndarray, v: np.ndarray, spec: TVBallSpec, gamma: float):
    """Per-(s, a) worst-case expectation of ``v``; returns ``(values, etas)``."""
    n_s, n_a, _ = kernel.shape
    if spec.rho == 0.0:
        return kernel @ v, np.zeros((n_s, n_a))
    _check_value_range(v, gamma)
    m = 0.0 if spec.use_fail_state_reduction else float(v.min())
    rows = np.ascontiguousarray(kernel.reshape(n_s * n_a, -1))
    h, eta = _backend.kernels.tv_dual_rows(
        rows, v, spec.rho, m, search_upper(spec.rho, gamma), _backend.threads()
    )
    return -h.reshape(n_s, n_a), eta.reshape(n_s, n_a)


def _finish(out: np.ndarray, rmdp: TabularRMDP) -> np.ndarray:
    np.clip(out, 0.0, rmdp.v_max, out=out)
    if rmdp.fail_state is not None:
        out[rmdp.fail_state] = 0.0
    return out


def robust_bellman_apply(q, rmdp: TabularRMDP, spec: TVBallSpec | None = None) -> np.ndarray:
    """``(T q)(s, a) = r(s, a) + gamma * inf_P E_P[max_b q(s', b)]``."""
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    v = np.asarray(q, dtype=float).max(axis=1)
    inner, _ = inner_inf_table(rmdp.kernel, v, spec, rmdp.gamma)
    return _finish(rmdp.reward + rmdp.gamma * inner, rmdp)


def robust_bellman_fixed_policy(
    q, policy: Policy, rmdp: TabularRMDP, spec: TVBallSpec | None = None
) -> np.ndarray:
    """Robust evaluation operator: next-state value is ``E_{a'~pi} q(s', a')``."""
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    v = state_values(np.asarray(q, dtype=float), policy)
    inner, _ = inner_inf_table(rmdp.kernel, v, spec, rmdp.gamma)
    return _finish(rmdp.reward + rmdp.gamma * inner, rmdp)


def nonrobust_bellman_apply(q, rmdp: TabularRMDP) -> np.ndarray:
    v = np.asarray(q, dtype=float).max(axis=1)
    out = rmdp.reward + rmdp.gamma * (rmdp.kernel @ v)
    return _finish(out, rmdp)


def apply_Tg(f, g, rmdp: TabularRMDP, spec: TVBallSpec | None = None) -> np.ndarray:
    """Operator with a fixed dual function ``g`` (anchor 0, as under a fail state).

    ``(T_g f)(s, a) = r - gamma (E_P0[(g(s,a) - max f(s', .))_+] - (1 - rho) g(s,a))``.
    Exact expectation under the nominal kernel; no clipping.
    """
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    g = np.asarray(g, dtype=float)
    upper = eta_upper(spec.rho, rmdp.gamma)
    if g.shape != rmdp.reward.shape:
        raise InvalidModelError(f"g shape {g.shape} != {rmdp.reward.shape}")
    if np.any(g < 0.0) or np.any(g > upper):
        raise InvalidModelError(f"g must lie in [0, {upper:.6g}]")
    v = np.asarray(f, dtype=float).max(axis=1)
    hinge = np.einsum("sat,sat->sa", rmdp.kernel, np.maximum(g[:, :, None] - v, 0.0))
    return rmdp.reward - rmdp.gamma * (hinge - (1.0 - spec.rho) * g)


def optimal_dual_table(f, rmdp: TabularRMDP, spec: TVBallSpec | None = None) -> np.ndarray:
    """Per-pair minimizing ``eta`` of the (reduced) dual for ``max f``."""
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    v = np.asarray(f, dtype=float).max(axis=1)
    _, eta = inner_inf_table(rmdp.kernel, v, spec, rmdp.gamma)
    return eta


def random_inner_problem(rng: np.random.Generator, max_support: int = 12):
    """Random ``(p0, v, rho, gamma)`` with ``rho in (0, 1]``; some entries tied or zero."""
    n = int(rng.integers(1, max_support + 1))
    p0 = rng.dirichlet(np.full(n, 0.7))
    if n > 2 and rng.random() < 0.3:
        p0[rng.integers(n)] = 0.0
        p0 /= p0.sum()
    gamma = float(rng.uniform(0.5, 0.99))
    v = rng.uniform(0.0, 1.0 / (1.0 - gamma), size=n)
    if rng.random() < 0.3:
        v = np.floor(v)  # ties
    rho = float(1.0 - rng.random())  # (0, 1]
    return p0, v, rho, gamma


def oracle_check(seed: int, n_cases: int = 1000, max_support: int = 12) -> list[dict]:
    """Compare dual and primal on random inner problems; one row per case."""
    rng = np.random.default_rng(seed)
    rows = []
    for case in range(n_cases):
        p0, v, rho, gamma = random_inner_problem(rng, max_support)
        primal, _ = tv_inner_inf_primal(p0, v, rho)
        dual = tv_inner_inf_dual(p0, v, TVBallSpec(rho), gamma).value
        rows.append(
            dict(case=case, p0=p0, v=v, rho=rho, gamma=gamma,
                 primal=primal, dual=dual, gap=abs(primal - dual))
        )
    return rows
