"""Command-line entry point: ``reject-inference {sweep,table1,fit}``.

One YAML file configures a run (see ``configs/`` for annotated examples).
Every section is validated before any computation and unknown keys are
errors. Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .data_model import (ClassConditionalGaussians, CsvSchema, DataError, FeatureDistribution,
                         GeneratorSpec, load_csv)
from .evaluation import (MIN_REPLICATIONS, REAL_DATA_CAVEAT, CsvSource, InsufficientReplicationsError, LeakageError,
                         MethodConfig, SweepConfig, Table1Config, acceptance_sweep, bootstrap_gini_diff,
                         gini, monte_carlo_table1)
from .generative import EMConfig, EMError, GenerativeModel
from .logistic import FitOptions
from .mechanisms import KINDS, MechanismError, MechanismSpec
from .methods import METHOD_NAMES, MethodError, run_method
from .seeding import check_seed, derive_rng, derive_seed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SIMULATION_ONLY = ("oracle_full", "ideal_reweighting")


class ConfigError(ValueError):
    pass


# -- strict parsing ---------------------------------------------------------------

def _section(m: Any, where: str, allowed, required=()) -> dict:
    if m is None:
        m = {}
    if not isinstance(m, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(m) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    missing = [k for k in required if k not in m]
    if missing:
        raise ConfigError(f"{where}: missing key(s) {', '.join(repr(k) for k in missing)}")
    return m


def _tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuple(x) for x in v)
    return v


def _dataclass_from(cls, m, where, required=(), skip=()):
    names = [f.name for f in fields(cls) if f.name not in skip]
    m = _section(m, where, names, required)
    return {k: _tuple(v) for k, v in m.items()}


def _features(m, where) -> FeatureDistribution:
    return FeatureDistribution(**_dataclass_from(FeatureDistribution, m, where))


def _generator(m, where) -> GeneratorSpec:
    kw = _dataclass_from(GeneratorSpec, m, where, required=("n_total", "d"), skip=("seed", "id_offset"))
    if "features" in kw:
        kw["features"] = _features(m["features"], f"{where}.features")
    if kw.get("classes") is not None:
        kw["classes"] = ClassConditionalGaussians(
            **_dataclass_from(ClassConditionalGaussians, m["classes"], f"{where}.classes",
                              required=("prior", "mean0", "mean1", "cov0", "cov1")))
    spec = GeneratorSpec(**kw)
    try:
        spec.validate()
    except DataError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return spec


def _mechanism(m, where) -> MechanismSpec:
    kw = _dataclass_from(MechanismSpec, m, where, required=("kind",),
                         skip=("scorer", "target_acceptance_rate", "seed"))
    if kw["kind"] not in KINDS:
        raise ConfigError(f"{where}.kind: expected one of {KINDS}, got {kw['kind']!r}")
    spec = MechanismSpec(target_acceptance_rate=1.0, **kw)
    try:
        spec.validate()
    except MechanismError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return spec


def _em(m, where) -> EMConfig:
    return EMConfig(**_dataclass_from(EMConfig, m, where))


def _methods(items, where, allow_simulation=True) -> tuple[MethodConfig, ...]:
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{where}: expected a non-empty list of methods")
    out = []
    for i, item in enumerate(items):
        w = f"{where}[{i}]"
        if isinstance(item, str):
            item = {"name": item}
        kw = _dataclass_from(MethodConfig, item, w, required=("name",))
        if kw["name"] not in METHOD_NAMES:
            raise ConfigError(f"{w}.name: unknown method {kw['name']!r}; expected one of {METHOD_NAMES}")
        if not allow_simulation and kw["name"] in SIMULATION_ONLY:
            raise ConfigError(f"{w}: {kw['name']} needs simulated ground truth")
        if "em" in kw:
            kw["em"] = _em(item["em"], f"{w}.em")
        mc = MethodConfig(**kw)
        if mc.k_bands < 2 or mc.inflation < 1 or mc.w_max <= 0:
            raise ConfigError(f"{w}: need k_bands >= 2, inflation >= 1, w_max > 0")
        out.append(mc)
    if len({m.name for m in out}) != len(out):
        raise ConfigError(f"{where}: duplicate method names")
    return tuple(out)


def _schema(m, where) -> CsvSchema:
    try:
        return CsvSchema.from_mapping(_section(m, where, ("label", "financed", "features", "id",
                                                          "keep_rejected_labels")))
    except DataError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: Path
    sweep: Optional[SweepConfig] = None
    table1: Optional[Table1Config] = None
    fit_methods: tuple[MethodConfig, ...] = ()
    fit_schema: Optional[CsvSchema] = None
    fit_holdout_fraction: float = 0.0
    fit_bootstrap: int = 1000
    ridge: float = 0.0
    raw: dict = field(default_factory=dict)


TOP_KEYS = ("seed", "output_dir", "scenario", "methods", "rates", "replications", "n_test", "bootstrap",
            "ridge", "table1", "fit")


def parse_config(doc: Any, base_dir: Path = Path(".")) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a parsed YAML document."""
    top = _section(doc, "config", TOP_KEYS, required=("seed",))
    try:
        seed = check_seed(top["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed: {exc}") from None
    ridge = float(top.get("ridge", 0.0))
    if ridge < 0:
        raise ConfigError("ridge must be >= 0")
    out_dir = Path(top.get("output_dir", "results"))

    sweep = None
    if "scenario" in top:
        sc = _section(top["scenario"], "scenario", ("generator", "mechanism", "pilot_fraction", "data"),
                      required=("mechanism",))
        if ("generator" in sc) == ("data" in sc):
            raise ConfigError("scenario: give exactly one of 'generator' (simulation) or 'data' (CSV)")
        gen = _generator(sc["generator"], "scenario.generator") if "generator" in sc else None
        src = None
        if "data" in sc:
            dm = _section(sc["data"], "scenario.data", ("path", "schema", "test_fraction"), required=("path", "schema"))
            tf = float(dm.get("test_fraction", 0.3))
            if not 0 < tf < 1:
                raise ConfigError("scenario.data.test_fraction must lie in (0, 1)")
            src = CsvSource(str(base_dir / dm["path"]), _schema(dm["schema"], "scenario.data.schema"), tf)
        mech = _mechanism(sc["mechanism"], "scenario.mechanism")
        if "methods" not in top or "rates" not in top:
            raise ConfigError("config: a scenario needs 'methods' and 'rates'")
        methods = _methods(top["methods"], "methods")
        rates = top["rates"]
        if not isinstance(rates, list) or not rates:
            raise ConfigError("rates: expected a non-empty list")
        rates = tuple(float(r) for r in rates)
        if any(not 0 < r <= 1 for r in rates) or len(set(rates)) != len(rates):
            raise ConfigError("rates: values must be distinct and lie in (0, 1]")
        pilot = float(sc.get("pilot_fraction", 0.1))
        if not 0 < pilot < 1:
            raise ConfigError("scenario.pilot_fraction must lie in (0, 1)")
        reps = int(top.get("replications", 1))
        boot = int(top.get("bootstrap", 1000))
        if reps < 1:
            raise ConfigError("insufficient replications: need at least 1")
        if boot < 200:
            raise ConfigError("bootstrap must be >= 200")
        sweep = SweepConfig(gen, mech, methods, rates, reps, int(top.get("n_test", 10000)), boot,
                            pilot, ridge, seed, src)
    table1 = None
    if "table1" in top:
        kw = _dataclass_from(Table1Config, top["table1"], "table1", skip=("seed", "jobs"))
        if "features" in kw:
            kw["features"] = _features(top["table1"]["features"], "table1.features")
        table1 = Table1Config(seed=seed, **kw)
        if table1.replications < MIN_REPLICATIONS:
            raise ConfigError(f"table1: insufficient replications ({table1.replications}); "
                              f"need at least {MIN_REPLICATIONS}")
        gen = GeneratorSpec(table1.n, table1.d, "misspecified", table1.theta_true, table1.misspec_c,
                            table1.features)
        try:
            gen.validate()
        except DataError as exc:
            raise ConfigError(f"table1: {exc}") from None
    fit_methods, schema, holdout, fit_boot = (), None, 0.0, 1000
    if "fit" in top:
        fm = _section(top["fit"], "fit", ("schema", "methods", "holdout_fraction", "bootstrap"),
                      required=("schema",))
        schema = _schema(fm["schema"], "fit.schema")
        fit_methods = _methods(fm.get("methods", ["financed_only"]), "fit.methods", allow_simulation=False)
        holdout = float(fm.get("holdout_fraction", 0.0))
        if not 0 <= holdout < 1:
            raise ConfigError("fit.holdout_fraction must lie in [0, 1)")
        fit_boot = int(fm.get("bootstrap", 1000))
        if fit_boot < 200:
            raise ConfigError("fit.bootstrap must be >= 200")
    return RunConfig(seed, out_dir, sweep, table1, fit_methods, schema, holdout, fit_boot, ridge, top)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(doc, path.parent)


# -- commands ---------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _override(cfg: RunConfig, out: Optional[str], seed: Optional[int], jobs: int) -> RunConfig:
    if seed is not None:
        seed = check_seed(seed)
        cfg = replace(cfg, seed=seed,
                      sweep=cfg.sweep and replace(cfg.sweep, seed=seed),
                      table1=cfg.table1 and replace(cfg.table1, seed=seed))
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = replace(cfg, sweep=cfg.sweep and replace(cfg.sweep, jobs=jobs),
                  table1=cfg.table1 and replace(cfg.table1, jobs=jobs))
    if out is not None:
        cfg = replace(cfg, output_dir=Path(out))
    return cfg


def sweep_summary(result) -> str:
    lines = []
    if result.real_data:
        lines.append(f"NOTE: {REAL_DATA_CAVEAT}")
    lines.append(f"acceptance-rate sweep, master seed {result.seed}")
    lines.append(f"{'method':<18} {'rate':>5} {'gini':>8} {'95% interval':>21} {'param_l2':>9}")
    for r in result.rows:
        pl2 = "" if np.isnan(r.param_l2) else f"{r.param_l2:9.4f}"
        lines.append(f"{r.method:<18} {r.rate:5.2f} {r.gini:8.4f}  [{r.lo:8.4f}, {r.hi:8.4f}] {pl2:>9}")
    return "\n".join(lines) + "\n"


def table1_summary(verdict) -> str:
    lines = ["theta_opt^f = theta_opt (bias_equal) and Sigma^f = Sigma (variance_equal), financed-only estimator"]
    for (arm, mech), c in verdict.cells.items():
        lines.append(f"  {arm:<15} {mech:<5} bias_equal={str(c.bias_equal):<5} (max |t| {c.max_abs_t:8.2f}) "
                     f"variance_equal={str(c.variance_equal):<5} (trace ratio {c.variance_ratio:.3f}) "
                     f"R={c.replications}")
    lines.append("expected pattern reproduced: " + str(verdict.matches_expected_pattern()))
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg: RunConfig) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep needs 'scenario', 'methods' and 'rates'")
    result = acceptance_sweep(cfg.sweep)
    _write(cfg.output_dir / "sweep.csv", result.to_csv())
    text = sweep_summary(result)
    _write(cfg.output_dir / "summary.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_table1(cfg: RunConfig) -> int:
    if cfg.table1 is None:
        raise ConfigError("table1 needs a 'table1' section")
    verdict = monte_carlo_table1(cfg.table1)
    _write(cfg.output_dir / "table1.csv", verdict.to_csv())
    text = table1_summary(verdict)
    _write(cfg.output_dir / "table1_summary.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def _model_record(scorer) -> dict:
    m = scorer.model
    if isinstance(m, GenerativeModel):
        return {"prior": m.prior, "mean0": m.mean0.tolist(), "mean1": m.mean1.tolist(),
                "cov0": m.cov0.tolist(), "cov1": m.cov1.tolist(), "converged": m.converged,
                "iterations": m.iterations}
    return {"theta": m.theta.tolist(), "converged": m.converged, "iterations": m.iterations,
            "loglik": m.loglik, "ridge": m.ridge}


def cmd_fit(cfg: RunConfig, data_csv) -> int:
    """Fit the configured methods on a user CSV; optionally score a financed holdout."""
    if cfg.fit_schema is None:
        raise ConfigError("fit needs a 'fit' section with a schema")
    data = load_csv(data_csv, cfg.fit_schema)
    train, holdout = data, None
    if cfg.fit_holdout_fraction > 0:
        fin = np.flatnonzero(data.financed)
        perm = derive_rng(cfg.seed, "fit-holdout").permutation(fin)
        ho = np.sort(perm[:int(round(cfg.fit_holdout_fraction * fin.size))])
        keep = np.setdiff1d(np.arange(data.n), ho)
        holdout = (data.features[ho], data.labels[ho])
        train = type(data)(data.features[keep], data.labels[keep], data.financed[keep], data.ids[keep],
                           feature_names=data.feature_names)
    opts = FitOptions(ridge=cfg.ridge)
    record = {"data": str(data_csv), "n": train.n, "financed": int(train.financed.sum()),
              "features": list(data.feature_names), "seed": cfg.seed, "methods": {}}
    lines = [f"fitted on {train.n} applicants ({int(train.financed.sum())} financed) from {data_csv}"]
    scorers = {}
    for m in cfg.fit_methods:
        sc = run_method(m.name, train, options=opts, k_bands=m.k_bands, w_max=m.w_max, inflation=m.inflation,
                        seed=derive_seed(cfg.seed, "fit", m.name), em=m.em)
        scorers[m.name] = sc
        record["methods"][m.name] = _model_record(sc)
        if sc.theta is not None:
            coefs = ", ".join(f"{n}={v:.6g}" for n, v in zip(("intercept", *data.feature_names), sc.theta))
            lines.append(f"{m.name}: {coefs}")
        else:
            lines.append(f"{m.name}: generative model, prior P(y=1) = {sc.model.prior:.6g}")
    if holdout is not None:
        lines.append(f"NOTE: {REAL_DATA_CAVEAT}")
        x_ho, y_ho = holdout
        base = scorers.get("financed_only")
        record["holdout_gini"] = {}
        for name, sc in scorers.items():
            g = gini(sc.logit(x_ho), y_ho)
            record["holdout_gini"][name] = g
            msg = f"holdout Gini {name}: {g:.4f}"
            if base is not None and name != "financed_only":
                diff = bootstrap_gini_diff(sc.logit(x_ho), base.logit(x_ho), y_ho, cfg.fit_bootstrap,
                                           derive_seed(cfg.seed, "fit-bootstrap", name))
                msg += f" (vs financed_only {diff.diff:+.4f}, 95% [{diff.lo:+.4f}, {diff.hi:+.4f}]"
                msg += ", significant)" if diff.significant else ", not significant)"
            lines.append(msg)
    _write(cfg.output_dir / "model.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    text = "\n".join(lines) + "\n"
    _write(cfg.output_dir / "fit_summary.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reject-inference",
                                description="Reject-inference methods for credit scoring under simulated selection.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("sweep", "test Gini of each method across acceptance rates (writes sweep.csv)"),
                        ("table1", "Monte Carlo check of theta/Sigma equality per cell (writes table1.csv)"),
                        ("fit", "fit methods on a CSV of real applicants (writes model.json)")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML run configuration")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int, help="master seed, unsigned 64-bit (overrides the config)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for replications")
        if name == "fit":
            s.add_argument("--data", required=True, help="CSV of applicants")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _override(load_config(args.config), args.out, args.seed, args.jobs)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "table1":
            return cmd_table1(cfg)
        return cmd_fit(cfg, args.data)
    except (ConfigError, DataError, InsufficientReplicationsError, LeakageError, MechanismError, EMError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MethodError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
