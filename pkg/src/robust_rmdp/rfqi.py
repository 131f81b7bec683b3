"""Robust fitted Q-iteration, its non-robust counterpart, and the error bound."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .approx import (
    ErmOptions,
    FeatureMap,
    LinearDualClass,
    LinearQClass,
    erm_dual,
    fit_targets,
    least_squares_q,
)
from .core import InvalidModelError, Policy, TabularRMDP, greedy_policy
from .data import Dataset


class RMDPShape(NamedTuple):
    """What an offline learner may know about the model: no kernel."""

    n_states: int
    n_actions: int
    gamma: float
    fail_state: int | None = None

    @classmethod
    def of(cls, rmdp: TabularRMDP) -> "RMDPShape":
        return cls(rmdp.n_states, rmdp.n_actions, rmdp.gamma, rmdp.fail_state)


def default_k_iters(gamma: float, eps: float = 1e-3) -> int:
    return math.ceil(math.log(1.0 / (eps * (1.0 - gamma))) / math.log(1.0 / gamma))


@dataclass
class RFQIConfig:
    k_iters: int | None = None
    rho: float = 0.1
    features: dict = field(default_factory=lambda: {"kind": "one-hot"})
    dual_features: dict | None = None
    ridge: float = 1e-8
    erm: ErmOptions = field(default_factory=ErmOptions)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.erm, dict):
            self.erm = ErmOptions.from_dict(self.erm)
        if self.k_iters is not None and self.k_iters < 0:
            raise InvalidModelError("k_iters must be >= 0")
        if not np.isfinite(self.rho) or self.rho < 0.0:
            raise InvalidModelError("rho must be finite and >= 0")
        if self.ridge < 0.0:
            raise InvalidModelError("ridge must be >= 0")

    def resolved_k(self, gamma: float) -> int:
        return default_k_iters(gamma) if self.k_iters is None else self.k_iters

    @classmethod
    def from_dict(cls, doc: dict) -> "RFQIConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidModelError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RFQIResult:
    q_final: np.ndarray
    policy: Policy
    per_iteration: list[dict]
    dual_tables: list[np.ndarray] = field(default_factory=list)
    algo: str = "rfqi"

    def to_json(self) -> dict:
        return {
            "algo": self.algo,
            "q": self.q_final.tolist(),
            "policy": self.policy.to_json(),
            "per_iteration": self.per_iteration,
        }


class RFQIError(RuntimeError):
    pass


def _check_shape(dataset: Dataset, shape: RMDPShape):
    if (dataset.n_states, dataset.n_actions) != (shape.n_states, shape.n_actions):
        raise InvalidModelError(
            f"dataset is {dataset.n_states}x{dataset.n_actions}, "
            f"model shape is {shape.n_states}x{shape.n_actions}"
        )
    if len(dataset) == 0:
        raise InvalidModelError("dataset is empty")


def run_rfqi(dataset: Dataset, shape: RMDPShape, config: RFQIConfig, callback=None) -> RFQIResult:
    """Alternate dual ERM and robust least squares for ``K`` rounds from ``Q_0 = 0``.

    Only the dataset and the model shape are used. ``callback(k, q)`` receives
    every iterate ``Q_k`` including ``Q_0``.
    """
    _check_shape(dataset, shape)
    if config.rho <= 0.0:
        raise InvalidModelError("RFQI needs rho > 0; use run_fqi for the nominal model")
    n_s, n_a = shape.n_states, shape.n_actions
    ffeat = FeatureMap.from_spec(config.features, n_s, n_a)
    gfeat = FeatureMap.from_spec(config.dual_features or config.features, n_s, n_a)
    atoms = dataset.atoms()
    f = LinearQClass.zeros(ffeat, shape.gamma, shape.fail_state)
    g_init = LinearDualClass.zeros(gfeat, config.rho, shape.gamma)
    g = g_init
    q = f.table()
    if callback is not None:
        callback(0, q)
    trace, duals = [], []
    for k in range(config.resolved_k(shape.gamma)):
        try:
            g, report = erm_dual(atoms, q, g if config.erm.warm_start else g_init, config.erm)
            f, residual = least_squares_q(atoms, q, g, f, config.ridge, config.rho)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            raise RFQIError(f"iteration {k}: {exc}") from exc
        q_next = f.table()
        trace.append(
            {
                "k": k,
                "dual_loss": report.empirical_loss,
                "regression_residual": residual,
                "q_change": float(np.max(np.abs(q_next - q))),
            }
        )
        duals.append(g.table())
        q = q_next
        if callback is not None:
            callback(k + 1, q)
    return RFQIResult(q, greedy_policy(q), trace, duals, "rfqi")


def run_fqi(dataset: Dataset, shape: RMDPShape, config: RFQIConfig, callback=None) -> RFQIResult:
    """Non-robust fitted Q-iteration with targets ``r + gamma max_b f_k(s', b)``."""
    _check_shape(dataset, shape)
    ffeat = FeatureMap.from_spec(config.features, shape.n_states, shape.n_actions)
    atoms = dataset.atoms()
    f = LinearQClass.zeros(ffeat, shape.gamma, shape.fail_state)
    q = f.table()
    if callback is not None:
        callback(0, q)
    trace = []
    for k in range(config.resolved_k(shape.gamma)):
        shift = shape.gamma * q.max(axis=1)[atoms.s_next]
        try:
            f, residual = fit_targets(atoms, shift, f, config.ridge)
        except (ArithmeticError, ValueError) as exc:
            raise RFQIError(f"iteration {k}: {exc}") from exc
        q_next = f.table()
        trace.append(
            {
                "k": k,
                "dual_loss": None,
                "regression_residual": residual,
                "q_change": float(np.max(np.abs(q_next - q))),
            }
        )
        q = q_next
        if callback is not None:
            callback(k + 1, q)
    return RFQIResult(q, greedy_policy(q), trace, [], "fqi")


def theorem1_bound(
    k_iters: int,
    n: float,
    gamma: float,
    rho: float,
    c_conc: float,
    eps_c: float,
    eps_dual: float,
    card_f: float,
    card_g: float,
    delta: float,
) -> float:
    """High-probability bound on ``J* - J^{pi_K}`` after ``K`` RFQI rounds on ``n`` samples.

    ``c_conc`` is the concentrability constant C itself (not its square root).
    Pass ``n = math.inf`` to drop the sampling term.
    """
    if k_iters < 0:
        raise ValueError("k_iters must be >= 0")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if rho <= 0.0:
        raise ValueError("rho must be > 0")
    if not n > 0:
        raise ValueError("n must be > 0")
    if c_conc <= 0.0 or eps_c < 0.0 or eps_dual < 0.0:
        raise ValueError("need C > 0 and non-negative approximation errors")
    if card_f < 1 or card_g < 1:
        raise ValueError("class cardinalities must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    horizon = (1.0 - gamma) ** 2
    optimization = gamma**k_iters / horizon
    approximation = math.sqrt(c_conc) * (math.sqrt(6.0 * eps_c) + gamma * eps_dual) / horizon
    log_term = math.log(2.0 * card_f * card_g / delta)
    statistical = 16.0 / (rho * (1.0 - gamma) ** 3) * math.sqrt(18.0 * c_conc * log_term / n)
    return optimization + approximation + statistical
