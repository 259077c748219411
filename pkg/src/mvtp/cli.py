"""Command-line front end: ``mvtp {estimate,sweep,simulate,sensitivity,diagnose,mp}``.

Runs are described by a JSON config (see :data:`RUN_KEYS`); the most common
fields can be overridden by flags. Exit codes: 0 success, 1 configuration or
input error, 2 numerical failure, 3 partial results written. Errors are also
reported as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ._parallel import resolve_threads
from .balance import SolverConfig
from .data import Dataset, load_csv, read_schema, validate_schema
from .diagnose import permutation_balance_test, tau_sweep
from .energy import EUCLIDEAN, build_gram
from .errors import (ConfigError, EmptyDataset, LayoutMismatch, MVTPError, ParseError,
                     SchemaMismatch, SourceTooNarrow, UnknownPolicyName)
from .estimate import ESTIMATORS, WEIGHTINGS, EstimationRecipe, bootstrap_ci, kernel_kind
from .outcome import KINDS as OUTCOME_KINDS
from .outcome import OutcomeConfig
from .plasmode import BenchmarkConfig, run_benchmark
from .policy import BUILTIN_POLICIES, VentSettings, builtin_policy, mechanical_power, shift_dataset
from .sensitivity import DEFAULT_LAMBDAS, sensitivity_curve

SCHEMA_VERSION = 1

RUN_KEYS = {
    "data": {"path", "schema", "schema_path", "use_subgroup"},
    "policy": {"name", "tau", "roles", "units"},
    "recipe": {"weighting", "estimator", "outcome_model", "lambda", "tol", "max_iter",
               "crossfit", "n_folds", "bandwidth", "n_trees"},
    "taus": None,
    "bootstrap": {"n_boot", "level"},
    "permutation": {"n_perm", "alpha"},
    "sensitivity": {"lambda_max", "lambdas"},
    "simulation": {"ns", "ps", "taus", "estimators", "n_replicates", "n_boot", "ci_estimators",
                   "ci_taus", "outcome_model", "crossfit", "lambda", "noise_fraction",
                   "truth_draws", "source_rows", "source"},
    "seed": None,
    "output_dir": None,
}

INPUT_ERRORS = (ConfigError, SchemaMismatch, ParseError, EmptyDataset, LayoutMismatch,
                UnknownPolicyName, SourceTooNarrow, FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    pass


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    recipe: dict = field(default_factory=dict)
    taus: list = field(default_factory=list)
    bootstrap: dict = field(default_factory=dict)
    permutation: dict = field(default_factory=dict)
    sensitivity: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "."

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _check_keys(doc, RUN_KEYS, "config")
        for key, allowed in RUN_KEYS.items():
            if allowed is not None and key in doc:
                _check_keys(doc[key], allowed, key)
        cfg = cls(**{k: v for k, v in doc.items()})
        if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not isinstance(cfg.taus, list):
            raise ConfigError("taus must be a list")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    # -- derived objects -------------------------------------------------------------

    def dataset(self) -> Dataset:
        if "path" not in self.data:
            raise ConfigError("data.path is required")
        if "schema" in self.data:
            schema = self.data["schema"]
        elif "schema_path" in self.data:
            schema = read_schema(self.data["schema_path"])
        else:
            raise ConfigError("data.schema or data.schema_path is required")
        d = load_csv(self.data["path"], validate_schema(schema))
        if self.data.get("use_subgroup"):
            if d.subgroup is None:
                raise ConfigError("use_subgroup requires a subgroup column in the schema")
            d = d.restrict_to_subgroup()
            d.require_estimable()
        return d

    def policy_family(self, d: Dataset):
        name = self.policy.get("name", "identity")
        roles = self.policy.get("roles")
        if name not in BUILTIN_POLICIES:
            raise UnknownPolicyName(f"unknown policy {name!r}; choose from {BUILTIN_POLICIES}")
        # validate the layout once up front
        builtin_policy(name, 1.0, roles, d.treatment_names)
        return lambda tau: builtin_policy(name, tau, roles, d.treatment_names)

    def tau(self) -> float:
        tau = float(self.policy.get("tau", 1.0))
        if not tau > 0:
            raise ConfigError("policy.tau must be positive")
        return tau

    def make_recipe(self, policy) -> EstimationRecipe:
        r = self.recipe
        weighting = r.get("weighting", "energy-penalized")
        estimator = r.get("estimator", "augmented")
        outcome_kind = r.get("outcome_model", "stack")
        if weighting not in WEIGHTINGS:
            raise ConfigError(f"recipe.weighting must be one of {WEIGHTINGS}")
        if estimator not in ESTIMATORS:
            raise ConfigError(f"recipe.estimator must be one of {ESTIMATORS}")
        if outcome_kind not in OUTCOME_KINDS:
            raise ConfigError(f"recipe.outcome_model must be one of {OUTCOME_KINDS}")
        try:
            solver = SolverConfig(lam=float(r.get("lambda", 1.0)), tol=float(r.get("tol", 1e-8)),
                                  max_iter=int(r.get("max_iter", 20000)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        outcome = OutcomeConfig(n_folds=int(r.get("n_folds", 5)), n_trees=int(r.get("n_trees", 200)),
                                seed=self.seed)
        bw = r.get("bandwidth")
        if bw is not None and not float(bw) > 0:
            raise ConfigError("recipe.bandwidth must be positive")
        return EstimationRecipe(policy=policy, weighting=weighting, estimator=estimator,
                                outcome_kind=outcome_kind, outcome=outcome,
                                crossfit=bool(r.get("crossfit", True)), solver=solver,
                                bandwidth=None if bw is None else float(bw))

    def n_boot(self) -> int:
        n = int(self.bootstrap.get("n_boot", 1000))
        if n < 50:
            raise ConfigError("bootstrap.n_boot must be at least 50")
        return n

    def level(self) -> float:
        level = float(self.bootstrap.get("level", 0.95))
        if not 0 < level < 1:
            raise ConfigError("bootstrap.level must be in (0, 1)")
        return level

    def perm(self):
        n_perm = int(self.permutation.get("n_perm", 500))
        alpha = float(self.permutation.get("alpha", 0.10))
        if n_perm < 100:
            raise ConfigError("permutation.n_perm must be at least 100")
        if not 0 < alpha < 1:
            raise ConfigError("permutation.alpha must be in (0, 1)")
        return n_perm, alpha

    def lambda_max(self) -> float:
        lm = float(self.sensitivity.get("lambda_max", 5.0))
        if lm < 1:
            raise ConfigError("sensitivity.lambda_max must be at least 1")
        return lm

    def lambdas(self):
        lams = self.sensitivity.get("lambdas", list(DEFAULT_LAMBDAS))
        arr = np.asarray(lams, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0 or np.any(arr < 1) or np.any(np.diff(arr) <= 0):
            raise ConfigError("sensitivity.lambdas must be strictly increasing values >= 1")
        return arr

    def benchmark(self) -> tuple:
        sim = dict(self.simulation)
        source = sim.pop("source", {"kind": "synthetic"})
        mapping = {"outcome_model": "outcome_kind", "lambda": "lam"}
        kwargs = {mapping.get(k, k): v for k, v in sim.items()}
        kwargs.setdefault("seed", self.seed)
        for key in ("ns", "ps", "taus", "estimators", "ci_estimators", "ci_taus"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        try:
            cfg = BenchmarkConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        _check_keys(source, {"kind", "path", "schema", "schema_path"}, "simulation.source")
        src = None
        label = "synthetic-factor-model"
        if source.get("kind", "synthetic") != "synthetic":
            sub = RunConfig(data={k: v for k, v in source.items() if k != "kind"})
            src = sub.dataset()
            label = f"csv:{os.path.basename(source.get('path', ''))}"
        return cfg, src, label


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- commands ---------------------------------------------------------------------------


def cmd_estimate(cfg: RunConfig, threads: int) -> int:
    d = cfg.dataset()
    tau = cfg.tau()
    policy = cfg.policy_family(d)(tau)
    recipe = cfg.make_recipe(policy)
    est = bootstrap_ci(d, recipe, n_boot=cfg.n_boot(), level=cfg.level(), seed=cfg.seed,
                       threads=threads, tau=tau)
    doc = est.to_dict()
    doc["policy"] = cfg.policy.get("name", "identity")
    path = os.path.join(cfg.output_dir, "estimate.json")
    _write(path, _dump(doc))
    print(f"policy {doc['policy']} tau={tau:g} [{recipe.weighting}/{recipe.estimator}]")
    print(f"  mu_q_hat  = {est.mu_q_hat:.6g}  ({est.level:.0%} CI {est.ci_low:.6g} .. {est.ci_high:.6g})")
    print(f"  observed  = {est.observed_mean:.6g}")
    print(f"  effect    = {est.effect:.6g}  (CI {est.effect_ci[0]:.6g} .. {est.effect_ci[1]:.6g})")
    print(f"  ESS = {est.ess:.1f}, converged = {est.converged}, missing replicates = {est.n_missing}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(cfg: RunConfig, threads: int) -> int:
    d = cfg.dataset()
    family = cfg.policy_family(d)
    if not cfg.taus:
        raise ConfigError("sweep needs a non-empty taus list")
    recipe = cfg.make_recipe(family(1.0))
    n_perm, alpha = cfg.perm()
    sweep = tau_sweep(d, family, cfg.taus, recipe, seed=cfg.seed, n_boot=cfg.n_boot(),
                      level=cfg.level(), n_perm=n_perm, alpha=alpha,
                      lambda_max=cfg.lambda_max(), threads=threads)
    path = os.path.join(cfg.output_dir, "sweep.csv")
    _write(path, sweep.to_csv())
    failed = sum(1 for r in sweep.rows if r.get("error"))
    print(f"{len(sweep.rows)} tau values, {failed} failed; wrote {path}")
    if failed == len(sweep.rows):
        return 2
    return 3 if failed else 0


def cmd_simulate(cfg: RunConfig, threads: int) -> int:
    bench, src, label = cfg.benchmark()
    report = run_benchmark(bench, source=src, threads=threads, source_label=label)
    csv_path = os.path.join(cfg.output_dir, "simulation.csv")
    json_path = os.path.join(cfg.output_dir, "simulation.json")
    _write(csv_path, report.to_csv())
    _write(json_path, report.to_json())
    for c in report.cells:
        cov = "" if np.isnan(c["coverage"]) else f" coverage={c['coverage']:.3f}"
        print(f"{c['estimator']:<34s} n={c['n']} p={c['p']} tau={c['tau']:<5g} "
              f"bias={c['bias']:+.4g}{cov}")
    print(f"source: {report.source_label}; runtime {report.runtime_seconds:.1f}s")
    print(f"wrote {csv_path} and {json_path}")
    return 3 if any(c["incomplete"] for c in report.cells) else 0


def cmd_sensitivity(cfg: RunConfig, threads: int) -> int:
    d = cfg.dataset()
    tau = cfg.tau()
    policy = cfg.policy_family(d)(tau)
    recipe = cfg.make_recipe(policy)
    est = bootstrap_ci(d, recipe, n_boot=cfg.n_boot(), level=cfg.level(), seed=cfg.seed,
                       threads=threads, tau=tau)
    curve = sensitivity_curve(est.point, est.replicates, cfg.lambdas(), level=cfg.level(),
                              lambda_max=cfg.lambda_max())
    doc = curve.to_dict()
    doc.update(policy=cfg.policy.get("name", "identity"), tau=tau, estimator=recipe.estimator,
               weighting=recipe.weighting, n_boot=est.n_boot)
    path = os.path.join(cfg.output_dir, "sensitivity.json")
    _write(path, _dump(doc))
    flag = " (not significant at 1)" if curve.not_significant_at_one else \
        " (significant at lambda_max)" if curve.significant_at_max else ""
    print(f"effect {curve.point_effect:.6g}; lambda* = {curve.lambda_star:.3f}{flag}")
    print(f"wrote {path}")
    return 0


def cmd_diagnose(cfg: RunConfig, threads: int) -> int:
    from .balance import effective_sample_size
    from .estimate import compute_weights
    d = cfg.dataset()
    tau = cfg.tau()
    policy = cfg.policy_family(d)(tau)
    recipe = cfg.make_recipe(policy)
    n_perm, alpha = cfg.perm()
    s = shift_dataset(policy, d)
    kind = kernel_kind(recipe.weighting) or EUCLIDEAN
    g = build_gram(d, s, kind=kind, bandwidth=recipe.bandwidth)
    w = compute_weights(d, s, recipe.weighting, recipe.solver, recipe.bandwidth,
                        gram=g if kernel_kind(recipe.weighting) else None)
    diag = permutation_balance_test(d, policy, w, g, n_perm=n_perm, alpha=alpha, seed=cfg.seed)
    doc = diag.to_dict()
    doc.update(policy=cfg.policy.get("name", "identity"), tau=tau, weighting=recipe.weighting,
               ess=effective_sample_size(w), converged=w.converged, n=d.n)
    path = os.path.join(cfg.output_dir, "diagnose.json")
    _write(path, _dump(doc))
    verdict = "pass" if diag.passed else "FAIL (shift may be too large to balance)"
    print(f"observed {diag.observed_stat:.6g} vs threshold {diag.threshold:.6g}: {verdict}")
    print(f"ESS = {doc['ess']:.1f} of n = {d.n}")
    print(f"wrote {path}")
    return 0


def cmd_mp(args) -> int:
    v = VentSettings(rr=args.rr, vt=args.vt, p_peak=args.p_peak, p_plateau=args.p_plateau,
                     peep=args.peep)
    print(repr(mechanical_power(v)))
    return 0


# -- argument parsing -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvtp", description="Energy-balancing estimation for modified "
                                               "vector-valued treatment policies.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, help_ in (("estimate", "policy-mean estimate with bootstrap CI"),
                        ("sweep", "estimate, diagnostics and lambda* over a tau grid"),
                        ("simulate", "plasmode bias/coverage benchmark"),
                        ("sensitivity", "sensitivity curve and largest significant lambda"),
                        ("diagnose", "permutation balance test and effective sample size")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", required=True, help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="random seed (overrides seed)")
        p.add_argument("--threads", type=int, help="worker processes (default: MVTP_THREADS or all cores)")
        if name != "simulate":
            p.add_argument("--policy", choices=BUILTIN_POLICIES, help="built-in policy name")
            p.add_argument("--tau", type=float, help="policy magnitude")
            p.add_argument("--n-boot", type=int, dest="n_boot", help="bootstrap replicates")
            p.add_argument("--weighting", choices=WEIGHTINGS)
            p.add_argument("--estimator", choices=ESTIMATORS)
            p.add_argument("--outcome-model", dest="outcome_model", choices=OUTCOME_KINDS)
            p.add_argument("--lambda", dest="lam", type=float, help="balancing penalty")
    p = sub.add_parser("mp", help="mechanical power (J/min) from five ventilator settings")
    p.add_argument("--rr", type=float, required=True, help="respiratory rate (breaths/min)")
    p.add_argument("--vt", type=float, required=True, help="tidal volume (L)")
    p.add_argument("--p-peak", dest="p_peak", type=float, required=True, help="peak pressure (cmH2O)")
    p.add_argument("--p-plateau", dest="p_plateau", type=float, required=True,
                   help="plateau pressure (cmH2O)")
    p.add_argument("--peep", type=float, required=True, help="PEEP (cmH2O)")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    if getattr(args, "policy", None) is not None:
        cfg.policy = {**cfg.policy, "name": args.policy}
    if getattr(args, "tau", None) is not None:
        cfg.policy = {**cfg.policy, "tau": args.tau}
    if getattr(args, "n_boot", None) is not None:
        cfg.bootstrap = {**cfg.bootstrap, "n_boot": args.n_boot}
    for attr, key in (("weighting", "weighting"), ("estimator", "estimator"),
                      ("outcome_model", "outcome_model"), ("lam", "lambda")):
        v = getattr(args, attr, None)
        if v is not None:
            cfg.recipe = {**cfg.recipe, key: v}
    return cfg


COMMANDS = {"estimate": cmd_estimate, "sweep": cmd_sweep, "simulate": cmd_simulate,
            "sensitivity": cmd_sensitivity, "diagnose": cmd_diagnose}


def _fail(code: int, exc: BaseException) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(1, exc)
    if args.command == "mp":
        try:
            return cmd_mp(args)
        except ValueError as exc:
            return _fail(1, exc)
    try:
        threads = resolve_threads(args.threads)
        cfg = _apply_overrides(RunConfig.load(args.config), args)
    except INPUT_ERRORS + (ValueError,) as exc:
        return _fail(1, exc)
    try:
        with threadpool_limits(1):
            return COMMANDS[args.command](cfg, threads)
    except INPUT_ERRORS as exc:
        return _fail(1, exc)
    except (MVTPError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return _fail(2, exc)


def main_exit():  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
