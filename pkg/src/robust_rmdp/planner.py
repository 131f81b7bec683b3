"""Exact planning: robust Q-iteration, robust policy evaluation, plain VI."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Policy, TabularRMDP, greedy_policy, state_values
from .dual import (
    TVBallSpec,
    nonrobust_bellman_apply,
    robust_bellman_apply,
    robust_bellman_fixed_policy,
)

DEFAULT_TOL = 1e-9


@dataclass
class PlanResult:
    q: np.ndarray
    policy: Policy
    iterations: int
    residual: float
    trace: list[float] = field(default_factory=list)
    converged: bool = True

    def value(self, rmdp: TabularRMDP) -> float:
        return float(rmdp.init_dist @ self.q.max(axis=1))

    def to_json(self) -> dict:
        return {
            "q": self.q.tolist(),
            "policy": self.policy.to_json(),
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "trace": list(self.trace),
        }


def default_max_iter(gamma: float, tol: float) -> int:
    """Ten times the contraction bound on iterations needed to reach ``tol``."""
    return 10 * math.ceil(math.log(1.0 / (tol * (1.0 - gamma))) / math.log(1.0 / gamma))


def _iterate(step, q0, gamma, tol, max_iter, callback=None):
    if tol <= 0.0:
        raise ValueError("tol must be > 0")
    if max_iter is None:
        max_iter = default_max_iter(gamma, tol)
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    q = q0
    trace = []
    for k in range(1, max_iter + 1):
        q_next = step(q)
        residual = float(np.max(np.abs(q_next - q)))
        trace.append(residual)
        q = q_next
        if callback is not None:
            callback(k, q)
        if residual <= tol:
            return q, k, trace, True
    return q, max_iter, trace, False


def rqi(
    rmdp: TabularRMDP,
    spec: TVBallSpec | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    callback=None,
    operator=None,
) -> PlanResult:
    """Robust Q-iteration ``Q_{k+1} = T Q_k`` from ``Q_0 = 0``.

    ``operator`` replaces the robust Bellman operator (used to run the
    iteration against the primal oracle in tests). ``callback(k, q)`` sees
    every iterate.
    """
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    if operator is None:
        def operator(q):
            return robust_bellman_apply(q, rmdp, spec)
    q0 = np.zeros((rmdp.n_states, rmdp.n_actions))
    q, k, trace, ok = _iterate(operator, q0, rmdp.gamma, tol, max_iter, callback)
    return PlanResult(q, greedy_policy(q), k, trace[-1], trace, ok)


def nonrobust_vi(
    rmdp: TabularRMDP, tol: float = DEFAULT_TOL, max_iter: int | None = None
) -> PlanResult:
    q0 = np.zeros((rmdp.n_states, rmdp.n_actions))
    q, k, trace, ok = _iterate(
        lambda q: nonrobust_bellman_apply(q, rmdp), q0, rmdp.gamma, tol, max_iter
    )
    return PlanResult(q, greedy_policy(q), k, trace[-1], trace, ok)


class NotConvergedError(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def robust_policy_value(
    policy: Policy,
    rmdp: TabularRMDP,
    spec: TVBallSpec | None = None,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> tuple[np.ndarray, float]:
    """Robust Q table of a fixed policy and ``J = E_{d0}[V^pi]``.

    Raises :class:`NotConvergedError` (carrying the last iterate) when
    ``max_iter`` is exhausted.
    """
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    q0 = np.zeros((rmdp.n_states, rmdp.n_actions))
    q, k, trace, ok = _iterate(
        lambda q: robust_bellman_fixed_policy(q, policy, rmdp, spec),
        q0, rmdp.gamma, tol, max_iter,
    )
    if not ok:
        raise NotConvergedError(f"robust evaluation residual {trace[-1]:.3g} after {k} sweeps", q)
    return q, float(rmdp.init_dist @ state_values(q, policy))


def enumerate_deterministic_policies(n_states: int, n_actions: int, limit: int = 4096):
    """Yield every deterministic policy; refuses when there are more than ``limit``."""
    if n_actions**n_states > limit:
        raise ValueError(f"{n_actions}^{n_states} policies exceed the enumeration limit {limit}")
    for actions in np.ndindex(*([n_actions] * n_states)):
        yield Policy.deterministic(actions, n_actions)
