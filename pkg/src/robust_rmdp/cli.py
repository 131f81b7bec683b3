"""``robust-rmdp`` command-line entry point.

Every command takes a model either from ``--rmdp FILE`` or from
``--benchmark NAME --param key=value ...``, an optional ``--config`` JSON file
whose keys mirror the long flag names (flags win), and writes its artifacts
under ``--out``. Exit codes: 0 ok, 1 input error, 2 non-convergence,
3 property failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import _backend
from .approx import ErmDivergenceError, ErmOptions, FeatureMap
from .benchmarks import make_benchmark
from .core import InvalidModelError, Policy, TabularRMDP, load_rmdp
from .data import (
    DatasetFormatError,
    exhaustive_dataset,
    generate_dataset,
    load_dataset,
    mu_from_policy,
    save_dataset,
    uniform_mu,
)
from .dual import TVBallSpec, oracle_check
from .harness import diagnose, evaluate_policy, perturbation_sweep
from .planner import nonrobust_vi, rqi
from .rfqi import RFQIConfig, RFQIError, RMDPShape, run_fqi, run_rfqi

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_PROPERTY = 0, 1, 2, 3
ORACLE_TOL = 1e-9


class InputError(Exception):
    """Bad flags, config or input files (exit code 1)."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(row[k]) for k in header])


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


class Settings:
    """Flag values layered over a JSON config over built-in defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = {}
        if args.config:
            doc = _read_json(args.config)
            if not isinstance(doc, dict):
                raise InputError(f"{args.config}: config must be a JSON object")
            self.config = {k.replace("-", "_"): v for k, v in doc.items()}

    def get(self, key, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        return self.config.get(key, default)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _benchmark_params(settings: Settings) -> dict:
    params = dict(settings.config.get("params", {}))
    for item in settings.args.param or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--param expects key=value, got {item!r}")
        params[key] = _parse_value(value)
    return params


def load_model(settings: Settings) -> TabularRMDP:
    path = settings.get("rmdp")
    name = settings.get("benchmark")
    if path and name:
        raise InputError("give either --rmdp or --benchmark, not both")
    if path:
        if not Path(path).exists():
            raise InputError(f"file not found: {path}")
        try:
            rmdp = load_rmdp(path)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: malformed model file ({exc})") from None
    elif name:
        rmdp = make_benchmark(name, **_benchmark_params(settings))
    else:
        raise InputError("a model is required: --rmdp FILE or --benchmark NAME")
    rho = settings.get("rho")
    if rho is not None:
        rmdp = rmdp.replace(rho=float(rho))
    return rmdp


def load_policy(path, n_actions: int) -> Policy:
    if not path:
        raise InputError("a policy file is required: --policy FILE")
    doc = _read_json(path)
    if isinstance(doc, dict) and "policy" in doc:
        doc = doc["policy"]
    try:
        return Policy.from_json(doc, n_actions)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed policy ({exc})") from None


def _check_policy(policy: Policy, rmdp: TabularRMDP) -> None:
    if policy.probs.shape != (rmdp.n_states, rmdp.n_actions):
        raise InputError(
            f"policy is {policy.probs.shape}, model is {(rmdp.n_states, rmdp.n_actions)}"
        )


def _out_dir(settings: Settings) -> Path:
    out = Path(settings.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _positive(name, value, kind=float, allow_zero=False):
    value = kind(value)
    if value < 0 or (value == 0 and not allow_zero):
        raise InputError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return value


# --- commands -----------------------------------------------------------------

def cmd_solve(settings: Settings) -> int:
    rmdp = load_model(settings)
    tol = _positive("tol", settings.get("tol", 1e-9))
    max_iter = settings.get("max_iter")
    if settings.get("nonrobust", False):
        result = nonrobust_vi(rmdp, tol, max_iter)
    else:
        result = rqi(rmdp, TVBallSpec.for_rmdp(rmdp), tol, max_iter)
    doc = result.to_json()
    doc["rho"] = 0.0 if settings.get("nonrobust", False) else rmdp.rho
    doc["J"] = result.value(rmdp)
    write_json(_out_dir(settings) / "plan.json", doc)
    if not result.converged:
        print(f"planner: no convergence after {result.iterations} iterations "
              f"(residual {result.residual:.3g})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _sampling_mu(settings: Settings, rmdp: TabularRMDP) -> np.ndarray:
    spec = settings.get("mu", "uniform")
    if spec == "uniform":
        return uniform_mu(rmdp.n_states, rmdp.n_actions)
    if isinstance(spec, str) and spec.startswith("policy:"):
        path, _, eps = spec[len("policy:"):].rpartition(":")
        if not path:
            raise InputError("--mu policy:<file>:<epsilon>")
        policy = load_policy(path, rmdp.n_actions)
        _check_policy(policy, rmdp)
        return mu_from_policy(rmdp, policy, float(eps))
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    raise InputError(f"unknown --mu {spec!r}; use uniform or policy:<file>:<epsilon>")


def cmd_gen_data(settings: Settings) -> int:
    rmdp = load_model(settings)
    mu = _sampling_mu(settings, rmdp)
    if settings.get("exhaustive", False):
        dataset = exhaustive_dataset(rmdp, mu)
    else:
        n = _positive("n", settings.get("n", 10000), int)
        seed = int(settings.get("seed", 0))
        dataset = generate_dataset(rmdp, mu, n, seed)
    save_dataset(dataset, _out_dir(settings) / "dataset.jsonl")
    return EXIT_OK


def _rfqi_config(settings: Settings, rmdp: TabularRMDP) -> RFQIConfig:
    erm = dict(settings.config.get("erm", {}))
    if settings.get("erm_method") is not None:
        erm["method"] = settings.get("erm_method")
    features = settings.get("features", {"kind": "one-hot"})
    dual = settings.get("dual_features")
    return RFQIConfig(
        k_iters=settings.get("k"),
        rho=rmdp.rho,
        features=_parse_value(features) if isinstance(features, str) else features,
        dual_features=_parse_value(dual) if isinstance(dual, str) else dual,
        ridge=float(settings.get("ridge", 1e-8)),
        erm=ErmOptions.from_dict(erm),
        seed=int(settings.get("seed", 0)),
    )


def cmd_train(settings: Settings) -> int:
    rmdp = load_model(settings)
    data_path = settings.get("data")
    if not data_path:
        raise InputError("train needs --data FILE")
    dataset = load_dataset(data_path)
    algo = settings.get("algo", "rfqi")
    if algo not in ("rfqi", "fqi"):
        raise InputError(f"--algo must be rfqi or fqi, got {algo!r}")
    config = _rfqi_config(settings, rmdp)
    shape = RMDPShape.of(rmdp)
    try:
        result = (run_rfqi if algo == "rfqi" else run_fqi)(dataset, shape, config)
    except RFQIError as exc:
        print(f"rfqi: {exc}", file=sys.stderr)
        if isinstance(exc.__cause__, ErmDivergenceError):
            return EXIT_NOT_CONVERGED
        return EXIT_INPUT
    out = _out_dir(settings)
    doc = result.to_json()
    doc["config"] = config.to_dict()
    doc["k_iters"] = config.resolved_k(rmdp.gamma)
    write_json(out / "train.json", doc)
    write_json(out / "policy.json", result.policy.to_json())
    rows = [{**r, "dual_loss": "" if r["dual_loss"] is None else r["dual_loss"]}
            for r in result.per_iteration]
    write_csv(out / "train_trace.csv", ["k", "dual_loss", "regression_residual", "q_change"], rows)
    return EXIT_OK


def cmd_eval(settings: Settings) -> int:
    rmdp = load_model(settings)
    policy = load_policy(settings.get("policy"), rmdp.n_actions)
    _check_policy(policy, rmdp)
    report = evaluate_policy(policy, rmdp, TVBallSpec.for_rmdp(rmdp))
    out = _out_dir(settings)
    row = {"rho": report.rho, "nominal_J": report.nominal_J, "robust_J": report.robust_J}
    write_json(out / "eval.json", row)
    write_csv(out / "eval.csv", ["rho", "nominal_J", "robust_J"], [row])
    return EXIT_OK


def _values(settings: Settings) -> list[float]:
    values = settings.get("values")
    if isinstance(values, str):
        try:
            values = [float(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise InputError(f"--values must be comma-separated numbers, got {values!r}") from None
    if not values:
        raise InputError("sweep needs --values")
    return [float(v) for v in values]


def cmd_sweep(settings: Settings) -> int:
    name = settings.get("benchmark")
    if not name:
        raise InputError("sweep needs --benchmark (the knob rebuilds the model)")
    knob = settings.get("knob")
    if not knob:
        raise InputError("sweep needs --knob")
    params = _benchmark_params(settings)
    if settings.get("rho") is not None:
        params["rho"] = float(settings.get("rho"))
    rmdp = make_benchmark(name, **params)
    policy = load_policy(settings.get("policy"), rmdp.n_actions)
    _check_policy(policy, rmdp)
    report = evaluate_policy(policy, rmdp)
    points = perturbation_sweep(policy, name, params, knob, _values(settings))
    out = _out_dir(settings)
    rows = [{"value": p.value, "J": p.J, "inside_ball": p.inside_ball, "max_tv": p.max_tv}
            for p in points]
    write_csv(out / "sweep.csv", ["value", "J", "inside_ball", "max_tv"], rows)
    write_json(out / "sweep.json", {
        "knob": knob, "rho": report.rho,
        "nominal_J": report.nominal_J, "robust_J": report.robust_J, "sweep": rows,
    })
    return EXIT_OK


def cmd_diagnose(settings: Settings) -> int:
    rmdp = load_model(settings)
    mu = _sampling_mu(settings, rmdp)
    features = settings.get("features", {"kind": "one-hot"})
    dual = settings.get("dual_features") or features
    fmap = FeatureMap.from_spec(_parse_value(features) if isinstance(features, str) else features,
                                rmdp.n_states, rmdp.n_actions)
    gmap = FeatureMap.from_spec(_parse_value(dual) if isinstance(dual, str) else dual,
                                rmdp.n_states, rmdp.n_actions)
    report = diagnose(
        rmdp, mu, fmap, gmap,
        n_probes=_positive("n-probes", settings.get("n_probes", 16), int, allow_zero=True),
        n_policies=_positive("n-policies", settings.get("n_policies", 32), int, allow_zero=True),
        seed=int(settings.get("seed", 0)),
    )
    out = _out_dir(settings)
    doc = report.to_json()
    doc["note"] = "probe-based estimates; each is a lower bound on the true constant"
    write_json(out / "diagnose.json", doc)
    write_csv(out / "diagnose.csv", ["probe", "eps_c", "eps_dual"], report.probes)
    return EXIT_OK


def cmd_oracle_check(settings: Settings) -> int:
    seed = int(settings.get("seed", 0))
    cases = _positive("cases", settings.get("cases", 1000), int)
    rows = oracle_check(seed, cases, int(settings.get("max_support", 12)))
    header = ["case", "support", "rho", "gamma", "p0", "v", "primal", "dual", "gap"]
    for r in rows:
        r["support"] = len(r["p0"])
        r["p0"] = ";".join(fmt(x) for x in r["p0"])
        r["v"] = ";".join(fmt(x) for x in r["v"])
    write_csv(_out_dir(settings) / "oracle.csv", header, rows)
    worst = max(r["gap"] for r in rows)
    print(f"oracle-check: {cases} cases, max gap {worst:.3g}")
    return EXIT_OK if worst <= ORACLE_TOL else EXIT_PROPERTY


COMMANDS = {
    "solve": cmd_solve,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "oracle-check": cmd_oracle_check,
}


# --- argument parsing ---------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--rmdp", help="model JSON file")
    p.add_argument("--benchmark", help="benchmark family: chain, gridworld, risky-safe")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="benchmark parameter")
    p.add_argument("--rho", type=float, help="TV radius (overrides the model's)")


def _add_feature_args(p):
    p.add_argument("--features", help='feature spec JSON or kind, e.g. one-hot')
    p.add_argument("--dual-features", help="dual feature spec (defaults to --features)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; keys mirror the long flags")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="worker cap (env ROBUST_RMDP_THREADS)")
    common.add_argument("--seed", type=int)

    parser = argparse.ArgumentParser(prog="robust-rmdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="exact robust Q-iteration")
    _add_model_args(p)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--nonrobust", action="store_true", default=None)

    p = sub.add_parser("gen-data", parents=[common], help="sample an offline dataset")
    _add_model_args(p)
    p.add_argument("--n", type=int, help="number of transitions")
    p.add_argument("--mu", help="uniform | policy:<file>:<epsilon>")
    p.add_argument("--exhaustive", action="store_true", default=None,
                   help="exact-expectation dataset weighted by mu * P")

    p = sub.add_parser("train", parents=[common], help="run RFQI or FQI on a dataset")
    _add_model_args(p)
    p.add_argument("--data", help="dataset JSONL")
    p.add_argument("--algo", choices=["rfqi", "fqi"])
    p.add_argument("-K", "--k", type=int, dest="k", help="iterations (default from gamma)")
    p.add_argument("--ridge", type=float)
    p.add_argument("--erm-method", choices=["auto", "exact", "subgradient", "lp"])
    _add_feature_args(p)

    p = sub.add_parser("eval", parents=[common], help="nominal and robust value of a policy")
    _add_model_args(p)
    p.add_argument("--policy", help="policy JSON or train.json")

    p = sub.add_parser("sweep", parents=[common], help="exact J along a benchmark knob")
    _add_model_args(p)
    p.add_argument("--policy", help="policy JSON or train.json")
    p.add_argument("--knob", help="benchmark parameter to vary, e.g. p_fail")
    p.add_argument("--values", help="comma-separated knob values")

    p = sub.add_parser("diagnose", parents=[common], help="estimate C, eps_c and eps_dual")
    _add_model_args(p)
    p.add_argument("--mu", help="uniform | policy:<file>:<epsilon>")
    p.add_argument("--n-probes", type=int)
    p.add_argument("--n-policies", type=int)
    _add_feature_args(p)

    p = sub.add_parser("oracle-check", parents=[common], help="dual vs primal on random cases")
    p.add_argument("--cases", type=int)
    p.add_argument("--max-support", type=int)
    return parser


def _threads(settings: Settings) -> int:
    value = settings.get("threads")
    if value is None:
        value = os.environ.get("ROBUST_RMDP_THREADS", 1)
    try:
        return _positive("threads", value, int)
    except ValueError:
        raise InputError(f"threads must be a positive integer, got {value!r}") from None


def _origin(exc: BaseException) -> str:
    """Short name of the package module that raised ``exc``."""
    name = "robust_rmdp"
    tb = exc.__traceback__
    while tb is not None:
        module = tb.tb_frame.f_globals.get("__name__", "")
        if module.startswith("robust_rmdp."):
            name = module
        tb = tb.tb_next
    return name.rsplit(".", 1)[-1]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = Settings(args)
        _backend.set_threads(_threads(settings))
        return COMMANDS[args.command](settings)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (InvalidModelError, DatasetFormatError) as exc:
        print(f"error: {_origin(exc)}: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
