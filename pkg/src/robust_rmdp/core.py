"""Tabular MDP/RMDP containers, policies, occupancy and nominal evaluation.

Value tables are plain ``numpy`` arrays: a Q table has shape ``(n_states,
n_actions)`` and a V table shape ``(n_states,)``. Range checks for them live in
:func:`check_q_table`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STOCH_TOL = 1e-12
OCC_TOL = 1e-10


class InvalidModelError(ValueError):
    """Raised when a model, policy or table violates its invariants."""


@dataclass(frozen=True, eq=False)
class TabularRMDP:
    """Finite RMDP with a total-variation ball of radius ``rho`` per (s, a).

    ``kernel[s, a, s']`` is the nominal transition model. ``fail_state`` is an
    optional absorbing zero-reward state.
    """

    kernel: np.ndarray
    reward: np.ndarray
    gamma: float
    init_dist: np.ndarray
    rho: float = 0.0
    fail_state: int | None = None

    def __post_init__(self):
        kernel = np.array(self.kernel, dtype=float)
        reward = np.array(self.reward, dtype=float)
        init = np.array(self.init_dist, dtype=float)
        for arr in (kernel, reward, init):
            arr.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "init_dist", init)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "rho", float(self.rho))
        if self.fail_state is not None:
            object.__setattr__(self, "fail_state", int(self.fail_state))
        if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
            raise InvalidModelError(f"kernel must have shape (S, A, S), got {kernel.shape}")
        if reward.shape != kernel.shape[:2]:
            raise InvalidModelError(
                f"reward shape {reward.shape} does not match kernel {kernel.shape[:2]}"
            )
        if init.shape != (kernel.shape[0],):
            raise InvalidModelError(f"init_dist shape {init.shape} != ({kernel.shape[0]},)")

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @property
    def v_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def replace(self, **changes) -> "TabularRMDP":
        fields = dict(
            kernel=self.kernel,
            reward=self.reward,
            gamma=self.gamma,
            init_dist=self.init_dist,
            rho=self.rho,
            fail_state=self.fail_state,
        )
        fields.update(changes)
        return TabularRMDP(**fields)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "rho": self.rho,
            "fail_state": self.fail_state,
            "reward": self.reward.tolist(),
            "kernel": self.kernel.tolist(),
            "init_dist": self.init_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularRMDP":
        try:
            rmdp = cls(
                kernel=doc["kernel"],
                reward=doc["reward"],
                gamma=doc["gamma"],
                init_dist=doc["init_dist"],
                rho=doc.get("rho", 0.0),
                fail_state=doc.get("fail_state"),
            )
        except KeyError as exc:
            raise InvalidModelError(f"missing field {exc.args[0]!r}") from None
        if (doc.get("n_states", rmdp.n_states), doc.get("n_actions", rmdp.n_actions)) != (
            rmdp.n_states,
            rmdp.n_actions,
        ):
            raise InvalidModelError("n_states/n_actions disagree with array shapes")
        problems = validate(rmdp)
        if problems:
            raise InvalidModelError("; ".join(problems))
        return rmdp


def save_rmdp(rmdp: TabularRMDP, path) -> None:
    Path(path).write_text(json.dumps(rmdp.to_dict()) + "\n")


def load_rmdp(path) -> TabularRMDP:
    return TabularRMDP.from_dict(json.loads(Path(path).read_text()))


def validate(rmdp: TabularRMDP) -> list[str]:
    """Return a description of every invariant violation (empty if none)."""
    problems = []
    gamma = rmdp.gamma
    if not 0.0 < gamma < 1.0:
        problems.append(f"gamma: {gamma} not in (0, 1)")
    if not (np.isfinite(rmdp.rho) and rmdp.rho >= 0.0):
        problems.append(f"rho: {rmdp.rho} must be finite and >= 0")

    neg = np.argwhere(rmdp.kernel < 0.0)
    for s, a, sn in neg:
        problems.append(
            f"kernel[{s},{a},{sn}]: negative probability {rmdp.kernel[s, a, sn]:.3g}"
        )
    row_err = rmdp.kernel.sum(axis=2) - 1.0
    for s, a in np.argwhere(np.abs(row_err) > STOCH_TOL):
        problems.append(
            f"kernel[{s},{a},:]: row sums to {1.0 + row_err[s, a]:.17g} "
            f"(off by {row_err[s, a]:.3g})"
        )

    bad_r = np.argwhere((rmdp.reward < 0.0) | (rmdp.reward > 1.0) | ~np.isfinite(rmdp.reward))
    for s, a in bad_r:
        problems.append(f"reward[{s},{a}]: {rmdp.reward[s, a]:.6g} outside [0, 1]")

    init_err = rmdp.init_dist.sum() - 1.0
    if abs(init_err) > STOCH_TOL or np.any(rmdp.init_dist < 0.0):
        problems.append(f"init_dist: not a distribution (sum off by {init_err:.3g})")

    sf = rmdp.fail_state
    if sf is not None:
        if not 0 <= sf < rmdp.n_states:
            problems.append(f"fail_state: index {sf} out of range")
        else:
            for a in range(rmdp.n_actions):
                if rmdp.reward[sf, a] != 0.0:
                    problems.append(
                        f"reward[{sf},{a}]: fail state reward {rmdp.reward[sf, a]:.6g} "
                        "must be 0 (fail-state assumption)"
                    )
                if rmdp.kernel[sf, a, sf] != 1.0:
                    problems.append(
                        f"kernel[{sf},{a},{sf}]: fail state self-loop "
                        f"{rmdp.kernel[sf, a, sf]:.6g} must be 1 (fail-state assumption)"
                    )
    return problems


def check_q_table(q: np.ndarray, gamma: float, fail_state: int | None = None, atol: float = 1e-9):
    """Raise :class:`InvalidModelError` if ``q`` leaves ``[0, 1/(1-gamma)]``."""
    q = np.asarray(q, dtype=float)
    hi = 1.0 / (1.0 - gamma)
    if q.ndim != 2:
        raise InvalidModelError(f"Q table must be 2-D, got shape {q.shape}")
    if not np.all(np.isfinite(q)) or q.min() < -atol or q.max() > hi + atol:
        raise InvalidModelError(
            f"Q table entries must lie in [0, {hi:.6g}], got [{q.min():.6g}, {q.max():.6g}]"
        )
    if fail_state is not None and np.any(q[fail_state] != 0.0):
        raise InvalidModelError(f"Q table row at fail state {fail_state} must be 0")
    return q


@dataclass(frozen=True, eq=False)
class Policy:
    """A stationary policy stored as action probabilities ``probs[s, a]``.

    Deterministic policies additionally keep their action indices in
    ``actions``.
    """

    probs: np.ndarray
    actions: np.ndarray | None = None

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=np.int64)
        if actions.ndim != 1 or np.any(actions < 0) or np.any(actions >= n_actions):
            raise InvalidModelError(f"action indices must lie in [0, {n_actions})")
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        actions = actions.copy()
        actions.setflags(write=False)
        probs.setflags(write=False)
        return cls(probs=probs, actions=actions)

    @classmethod
    def stochastic(cls, probs) -> "Policy":
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2 or np.any(probs < 0.0):
            raise InvalidModelError("policy probabilities must be a non-negative 2-D array")
        err = np.abs(probs.sum(axis=1) - 1.0)
        if np.any(err > STOCH_TOL):
            s = int(np.argmax(err))
            raise InvalidModelError(f"policy row {s} sums to {probs[s].sum():.17g}")
        probs.setflags(write=False)
        return cls(probs=probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls.stochastic(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def is_deterministic(self) -> bool:
        return self.actions is not None

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    def to_json(self):
        if self.is_deterministic:
            return {"kind": "deterministic", "actions": self.actions.tolist()}
        return {"kind": "stochastic", "probs": self.probs.tolist()}

    @classmethod
    def from_json(cls, doc, n_actions: int | None = None) -> "Policy":
        if isinstance(doc, list):
            doc = {"kind": "deterministic", "actions": doc}
        if doc["kind"] == "deterministic":
            if n_actions is None:
                n_actions = max(doc["actions"]) + 1
            return cls.deterministic(doc["actions"], n_actions)
        return cls.stochastic(doc["probs"])


def greedy_policy(q: np.ndarray) -> Policy:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    return Policy.deterministic(np.argmax(q, axis=1), q.shape[1])


def state_values(q: np.ndarray, policy: Policy | None = None) -> np.ndarray:
    """``max_a q[s, a]``, or ``E_{a~pi(s)} q[s, a]`` when a policy is given."""
    if policy is None:
        return q.max(axis=1)
    if policy.is_deterministic:
        return q[np.arange(q.shape[0]), policy.actions]
    return np.einsum("sa,sa->s", policy.probs, q)


def policy_kernel(policy: Policy, kernel: np.ndarray) -> np.ndarray:
    """State-to-state transition matrix ``P_pi[s, s']`` under ``policy``."""
    return np.einsum("sa,sat->st", policy.probs, kernel)


def occupancy(policy: Policy, kernel: np.ndarray, gamma: float, init_dist) -> np.ndarray:
    """Normalized discounted state-action occupancy ``d[s, a]``.

    Solves the flow equations ``(I - gamma P_pi^T) x = (1 - gamma) d0`` by a
    dense LU factorization, then splits state mass across actions by ``pi``.
    """
    kernel = np.asarray(kernel, dtype=float)
    d0 = np.asarray(init_dist, dtype=float)
    n = kernel.shape[0]
    p_pi = policy_kernel(policy, kernel)
    system = np.eye(n) - gamma * p_pi.T
    x = np.linalg.solve(system, (1.0 - gamma) * d0)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("occupancy flow system produced non-finite values")
    if x.min() < -OCC_TOL:
        raise np.linalg.LinAlgError(f"occupancy solve returned negative mass {x.min():.3g}")
    # round-off can leave tiny negatives on unreachable states
    x = np.maximum(x, 0.0)
    dist = x[:, None] * policy.probs
    total = dist.sum()
    if abs(total - 1.0) > OCC_TOL:
        raise np.linalg.LinAlgError(f"occupancy mass {total:.17g} differs from 1")
    return dist


def policy_value_nominal(policy: Policy, rmdp: TabularRMDP) -> tuple[np.ndarray, float]:
    """Exact non-robust Q table of ``policy`` under the nominal kernel, and J."""
    n = rmdp.n_states
    p_pi = policy_kernel(policy, rmdp.kernel)
    r_pi = np.einsum("sa,sa->s", policy.probs, rmdp.reward)
    v = np.linalg.solve(np.eye(n) - rmdp.gamma * p_pi, r_pi)
    q = rmdp.reward + rmdp.gamma * rmdp.kernel @ v
    return q, float(rmdp.init_dist @ v)
