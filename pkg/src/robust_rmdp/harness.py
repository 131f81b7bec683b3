"""Policy evaluation under perturbation and estimates of the assumption constants.

The constants (concentrability, completeness error, dual realizability gap)
are suprema over policies or function classes. They are estimated by
probing, so every estimate is a lower bound on the true constant.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .approx import (
    ErmOptions,
    FeatureMap,
    LinearDualClass,
    LinearQClass,
    dual_loss_population,
    erm_dual,
    pointwise_dual_minimum,
)
from .benchmarks import make_benchmark
from .core import Policy, TabularRMDP, occupancy, policy_value_nominal
from .data import exhaustive_dataset
from .dual import TVBallSpec, robust_bellman_apply
from .planner import enumerate_deterministic_policies, robust_policy_value, rqi

ENUM_LIMIT = 4096


@dataclass
class SweepPoint:
    value: float
    J: float
    inside_ball: bool
    max_tv: float


@dataclass
class EvalReport:
    nominal_J: float
    robust_J: float
    rho: float
    sweep: list[SweepPoint] = field(default_factory=list)


@dataclass
class DiagnosticsReport:
    c_estimate: float
    eps_c_estimate: float
    eps_dual_estimate: float
    mu_coverage: float
    c_infinite: bool = False
    probes: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = asdict(self)
        if self.c_infinite:
            doc["c_estimate"] = "inf"
        return doc


def evaluate_policy(policy: Policy, rmdp: TabularRMDP, spec: TVBallSpec | None = None) -> EvalReport:
    """Nominal J and exact worst-case J over the TV ball."""
    spec = spec or TVBallSpec.for_rmdp(rmdp)
    _, nominal = policy_value_nominal(policy, rmdp)
    if spec.rho == 0.0:
        robust = nominal
    else:
        _, robust = robust_policy_value(policy, rmdp, spec)
    return EvalReport(nominal, robust, spec.rho)


def max_tv_distance(kernel_a: np.ndarray, kernel_b: np.ndarray) -> float:
    """Largest per-(s, a) total-variation distance between two kernels."""
    return float(0.5 * np.abs(kernel_a - kernel_b).sum(axis=2).max())


def perturbation_sweep(
    policy: Policy,
    family: str,
    params: dict,
    knob: str,
    values,
    rho: float | None = None,
) -> list[SweepPoint]:
    """Exact nominal J of ``policy`` on ``family`` rebuilt with ``params[knob] = value``.

    Each point records whether the perturbed kernel lies inside the TV ball
    of radius ``rho`` (default ``params["rho"]``) around the unperturbed one.
    """
    base = make_benchmark(family, **params)
    rho = base.rho if rho is None else rho
    points = []
    for value in values:
        try:
            rmdp = make_benchmark(family, **{**params, knob: value})
        except ValueError as exc:
            raise ValueError(f"knob {knob}={value!r} gives an invalid model: {exc}") from None
        if rmdp.kernel.shape != base.kernel.shape:
            raise ValueError(f"knob {knob}={value!r} changes the state space")
        _, j = policy_value_nominal(policy, rmdp)
        tv = max_tv_distance(rmdp.kernel, base.kernel)
        points.append(SweepPoint(float(value), j, tv <= rho + 1e-12, tv))
    return points


def _policy_probes(rmdp: TabularRMDP, n_policies: int, seed: int, include_deterministic=True):
    n_s, n_a = rmdp.n_states, rmdp.n_actions
    if include_deterministic and n_a**n_s <= ENUM_LIMIT:
        yield from enumerate_deterministic_policies(n_s, n_a, ENUM_LIMIT)
    rng = np.random.default_rng(seed)
    for _ in range(n_policies):
        yield Policy.stochastic(rng.dirichlet(np.ones(n_a), size=n_s))


def estimate_concentratability(
    mu,
    rmdp: TabularRMDP,
    n_policies: int = 32,
    seed: int = 0,
    policies=None,
    include_deterministic: bool = True,
) -> float:
    """Largest ``d_pi(s, a) / mu(s, a)`` over probe policies (the square root of C).

    Probes are ``policies`` when given, else all deterministic policies (when
    there are at most 4096) plus ``n_policies`` random stochastic ones.
    Returns ``inf`` when a probe visits a pair that ``mu`` never samples.
    """
    mu = np.asarray(mu, dtype=float)
    probes = policies if policies is not None else _policy_probes(
        rmdp, n_policies, seed, include_deterministic
    )
    worst = 0.0
    for policy in probes:
        d = occupancy(policy, rmdp.kernel, rmdp.gamma, rmdp.init_dist)
        visited = d > 0.0
        if np.any(visited & (mu <= 0.0)):
            return np.inf
        worst = max(worst, float(np.max(d[visited] / mu[visited])))
    return worst


def _project(fmap: FeatureMap, target: np.ndarray, mu: np.ndarray, rmdp: TabularRMDP) -> np.ndarray:
    """``mu``-weighted least-squares projection onto F (clipped, fail rows pinned to 0).

    Fail rows are left out of the fit since every member of F is zero there.
    """
    weights = mu.copy()
    if rmdp.fail_state is not None:
        weights[rmdp.fail_state] = 0.0
    root = np.sqrt(weights.reshape(-1))
    w, *_ = np.linalg.lstsq(root[:, None] * fmap.matrix, root * target.reshape(-1), rcond=None)
    out = np.clip(fmap.matrix @ w, 0.0, rmdp.v_max).reshape(target.shape)
    if rmdp.fail_state is not None:
        out[rmdp.fail_state] = 0.0
    return out


def function_probes(
    fmap: FeatureMap, rmdp: TabularRMDP, spec: TVBallSpec, mu, n_probes: int, seed: int
) -> list[np.ndarray]:
    """Probe members of F: projections of random tables and of the RQI iterates.

    The zero function (the first RQI iterate) is always included.
    """
    mu = np.asarray(mu, dtype=float)
    rng = np.random.default_rng(seed)
    shape = (rmdp.n_states, rmdp.n_actions)
    tables = [rng.uniform(0.0, rmdp.v_max, size=shape) for _ in range(n_probes)]
    iterates = [np.zeros(shape)]
    rqi(rmdp, spec, tol=1e-6, callback=lambda k, q: iterates.append(q.copy()))
    return [_project(fmap, t, mu, rmdp) for t in iterates + tables]


def completeness_error(f: np.ndarray, fmap: FeatureMap, rmdp: TabularRMDP, spec: TVBallSpec, mu) -> float:
    """``min_{f' in F} ||f' - T f||^2_{2, mu}`` with the inner minimum by weighted least squares."""
    mu = np.asarray(mu, dtype=float)
    tf = robust_bellman_apply(f, rmdp, spec)
    proj = _project(fmap, tf, mu, rmdp)
    return float(np.sum(mu * (proj - tf) ** 2))


def estimate_completeness(
    fclass: FeatureMap | LinearQClass,
    rmdp: TabularRMDP,
    spec: TVBallSpec,
    mu,
    n_probes: int = 16,
    seed: int = 0,
) -> float:
    """Worst completeness error over :func:`function_probes`."""
    fmap = fclass.features if isinstance(fclass, LinearQClass) else fclass
    probes = function_probes(fmap, rmdp, spec, mu, n_probes, seed)
    return max(completeness_error(f, fmap, rmdp, spec, mu) for f in probes)


def dual_realizability_gap(f: np.ndarray, gmap: FeatureMap, rmdp: TabularRMDP, mu, rho: float) -> float:
    """Best population dual loss over G minus the pointwise (unrestricted) optimum."""
    gclass = LinearDualClass.zeros(gmap, rho, rmdp.gamma)
    method = "exact" if gmap.is_partition else "lp"
    population = exhaustive_dataset(rmdp, mu)
    g, _ = erm_dual(population, f, gclass, ErmOptions(method=method, tol=1e-8))
    best_in_class = dual_loss_population(g, f, rmdp, mu, rho)
    return max(best_in_class - pointwise_dual_minimum(f, rmdp, mu, rho), 0.0)


def estimate_dual_gap(
    gclass: FeatureMap | LinearDualClass,
    fclass: FeatureMap | LinearQClass,
    rmdp: TabularRMDP,
    mu,
    rho: float,
    n_probes: int = 16,
    seed: int = 0,
) -> float:
    """Worst dual realizability gap over probe functions from F."""
    gmap = gclass.features if isinstance(gclass, LinearDualClass) else gclass
    fmap = fclass.features if isinstance(fclass, LinearQClass) else fclass
    spec = TVBallSpec(rho, use_fail_state_reduction=rmdp.fail_state is not None)
    probes = function_probes(fmap, rmdp, spec, mu, n_probes, seed)
    return max(dual_realizability_gap(f, gmap, rmdp, mu, rho) for f in probes)


def diagnose(
    rmdp: TabularRMDP,
    mu,
    fmap: FeatureMap,
    gmap: FeatureMap | None = None,
    rho: float | None = None,
    n_probes: int = 16,
    n_policies: int = 32,
    seed: int = 0,
) -> DiagnosticsReport:
    """Estimate all three constants; ``probes`` holds one row per probe function."""
    mu = np.asarray(mu, dtype=float)
    rho = rmdp.rho if rho is None else rho
    gmap = gmap or fmap
    spec = TVBallSpec(rho, use_fail_state_reduction=rmdp.fail_state is not None)
    c = estimate_concentratability(mu, rmdp, n_policies, seed)
    rows = []
    for i, f in enumerate(function_probes(fmap, rmdp, spec, mu, n_probes, seed)):
        eps_c = completeness_error(f, fmap, rmdp, spec, mu)
        eps_dual = dual_realizability_gap(f, gmap, rmdp, mu, rho) if rho > 0 else 0.0
        rows.append({"probe": i, "eps_c": eps_c, "eps_dual": eps_dual})
    return DiagnosticsReport(
        c_estimate=c,
        eps_c_estimate=max(r["eps_c"] for r in rows),
        eps_dual_estimate=max(r["eps_dual"] for r in rows),
        mu_coverage=float(np.mean(mu > 0.0)),
        c_infinite=bool(np.isinf(c)),
        probes=rows,
    )
