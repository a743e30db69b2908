"""Command-line interface: ``penmeta {meta,fixed,simulate,oracle,plotdata}``.

Every run writes a ``manifest.json`` echoing the configuration, seed and
software version.  Outputs are rendered in memory first and moved into
place only after the whole run succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .dist import AgeDistribution, PenetranceModel, weibull_cdf_values
from .fixed import FixedEffectsError, fit_fixed_effects
from .likelihood import TabulatedBaseline, parse_baseline
from .sampler import DEFAULT_AGES, HyperPriorConfig, MCMCStallError, consensus_penetrance, run_mcmc
from .simulation import (
    SimulationRun,
    SimulationSetting,
    fit_weibull_to_curve,
    preset,
    rr_or_to_penetrance,
    run_simulation,
    true_penetrance_oracle,
)
from .studies import PENETRANCE, RetentionError, StudyFormatError, load_studies, prepare_studies

DEFAULT_BASELINE = "weibull:3.65,143.2426,185"
EXIT_INPUT, EXIT_CONVERGENCE = 2, 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --- argument helpers --------------------------------------------------------------

def _ages(text: str) -> tuple[float, ...]:
    """``40,50,60`` or an inclusive range ``START:STOP:STEP``."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            ages = tuple(float(a) for a in np.arange(start, stop + step / 2, step))
        else:
            ages = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse ages {text!r}") from None
    if not ages or any(a <= 0 for a in ages) or any(b <= a for a, b in zip(ages, ages[1:])):
        raise argparse.ArgumentTypeError("ages must be positive and strictly increasing")
    return ages


def _age_dist(text: str) -> AgeDistribution:
    try:
        mean, sd = (float(x) for x in text.split(","))
        return AgeDistribution(mean, sd)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected MEAN,SD ({exc})") from None


def _threads_default() -> int:
    try:
        return max(1, int(os.environ.get("PENMETA_THREADS", "1")))
    except ValueError:
        return 1


def _resolve_seed(seed):
    return int(np.random.SeedSequence().entropy % 2**32) if seed is None else seed


def _baseline(text: str):
    try:
        return parse_baseline(text)
    except (OSError, ValueError) as exc:
        raise CliError(f"bad baseline {text!r}: {exc}") from None


def _baseline_echo(text: str, baseline) -> dict:
    if isinstance(baseline, TabulatedBaseline):
        return {"source": text, "ages": baseline.ages.tolist(), "risk": baseline.risk.tolist()}
    return {"source": text}


def _load(path) -> list:
    try:
        records = load_studies(path)
    except FileNotFoundError:
        raise CliError(f"study file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from None
    except StudyFormatError as exc:
        raise CliError(str(exc)) from None
    if not records:
        raise CliError(f"no studies in {path}")
    return records


# --- output ---------------------------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return f"{float(x):.10g}"


def _age(x) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_outputs(out_dir, files: dict[str, str]) -> None:
    """Write every file to a temporary name first, then rename them all into place."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
            staged.append((tmp, out / name))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _manifest(command: str, args: argparse.Namespace, seed, extra: dict | None = None) -> str:
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
              if k not in ("func", "out")}
    config["seed"] = seed
    body = {"command": command, "version": __version__, "config": config}
    if extra:
        body.update(extra)
    return _json(body)


# --- subcommands ------------------------------------------------------------------------

def cmd_meta(args) -> dict[str, str]:
    records = _load(args.studies)
    baseline = _baseline(args.baseline)
    seed = _resolve_seed(args.seed)
    if not args.iters > args.burnin >= 0:
        raise CliError("need --iters > --burnin >= 0")
    if args.chains < 1:
        raise CliError("need at least one chain")
    prep_seed, mcmc_seed = np.random.SeedSequence(seed).spawn(2)
    try:
        prepared = prepare_studies(records, args.default_age, args.covariance_draws, prep_seed)
    except (RetentionError, StudyFormatError, ValueError) as exc:
        raise CliError(str(exc)) from None
    try:
        draws = run_mcmc(prepared, baseline, HyperPriorConfig(), args.iters, args.burnin, args.chains,
                         int(mcmc_seed.generate_state(1)[0]), args.ages, args.thin)
    except MCMCStallError as exc:
        raise CliError(f"sampler failed: {exc}", EXIT_CONVERGENCE) from None
    summary = consensus_penetrance(draws)
    diagnostics = {
        "acceptance": draws.acceptance_rates(),
        "rejected_invalid": sum(ch.rejected_invalid for ch in draws.chains) // len(draws.chains),
        "study_ids": list(draws.study_ids),
        "study_notes": {p.id: list(p.notes) for p in prepared if p.notes},
    }
    if args.chains > 1:
        rhat = draws.gelman_rubin()
        diagnostics["gelman_rubin"] = rhat
        diagnostics["max_gelman_rubin"] = max(rhat.values())
    return {
        "consensus.csv": _csv(["age", "mean", "lower", "upper"],
                              [[_age(a), _num(m), _num(l), _num(u)] for a, m, l, u in summary.rows()]),
        "posterior.csv": draws.to_csv(),
        "diagnostics.json": _json(diagnostics),
        "manifest.json": _manifest("meta", args, seed, {"baseline": _baseline_echo(args.baseline, baseline)}),
    }


def cmd_fixed(args) -> dict[str, str]:
    records = _load(args.studies)
    baseline = _baseline(args.baseline)
    seed = _resolve_seed(args.seed)
    prep_seed, fe_seed = np.random.SeedSequence(seed).spawn(2)
    try:
        prepared = prepare_studies(records, args.default_age, args.covariance_draws, prep_seed)
        fit = fit_fixed_effects(prepared, baseline, args.ages, seed=int(fe_seed.generate_state(1)[0]))
    except FixedEffectsError as exc:
        raise CliError(f"fixed-effects fit failed: {exc}", EXIT_CONVERGENCE) from None
    except (RetentionError, StudyFormatError, ValueError) as exc:
        raise CliError(str(exc)) from None
    fit_info = {"kappa": fit.kappa_hat, "lambda": fit.lambda_hat, "loglik": fit.loglik,
                "hessian_repaired": fit.hessian_repaired}
    return {
        "fixed.csv": _csv(["method", "age", "mean", "lower", "upper"],
                          [["fixed", _age(a), _num(p), _num(l), _num(u)] for a, p, l, u in fit.rows()]),
        "manifest.json": _manifest("fixed", args, seed, {"fit": fit_info}),
    }


def _setting(args) -> SimulationSetting:
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
            setting = SimulationSetting.from_dict(cfg.get("setting", cfg))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise CliError(f"bad simulation config {args.config}: {exc}") from None
        if args.scenario is not None:
            setting = setting.with_scenario(args.scenario)
        return setting
    return preset(args.preset, args.scenario or 1)


def cmd_simulate(args) -> dict[str, str]:
    setting = _setting(args)
    seed = _resolve_seed(args.seed)
    overrides = {"seed": seed, "threads": args.threads, "chains": args.chains}
    for key, val in (("replicates", args.replicates), ("iterations", args.iters), ("burn_in", args.burnin)):
        if val is not None:
            overrides[key] = val
    try:
        run = SimulationRun.desk(setting, **overrides) if args.desk_scale else SimulationRun(setting, **overrides)
        result = run_simulation(run)
    except MCMCStallError as exc:
        raise CliError(f"sampler failed: {exc}", EXIT_CONVERGENCE) from None
    except (RuntimeError, ValueError) as exc:
        raise CliError(f"infeasible simulation: {exc}") from None
    diagnostics = {
        "counters": dict(sorted(result.counters.items())),
        "max_gelman_rubin": float(np.nanmax(result.rhat_max)) if run.chains > 1 else None,
        "gelman_rubin_by_replicate": result.rhat_max.tolist() if run.chains > 1 else None,
    }
    return {
        "results.csv": result.results_csv(),
        "summary.csv": result.summary_csv(),
        "diagnostics.json": _json(diagnostics),
        "manifest.json": _manifest("simulate", args, seed, {"run": run.to_dict()}),
    }


def cmd_oracle(args) -> dict[str, str]:
    setting = preset(args.preset)
    seed = _resolve_seed(args.seed)
    truth = true_penetrance_oracle(setting, args.ages, args.draws, rng=np.random.default_rng(seed))
    return {
        "truth.csv": _csv(["age", "penetrance"], [[_age(a), _num(v)] for a, v in zip(args.ages, truth)]),
        "manifest.json": _manifest("oracle", args, seed),
    }


def _read_table(path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{path} has no rows")
    return {k: [r[k] for r in rows] for k in rows[0]}


def _conversion_grid(baseline) -> np.ndarray:
    if isinstance(baseline, TabulatedBaseline):
        return baseline.ages[baseline.ages > 0]
    return np.arange(5.0, 95.0, 5.0)


def study_curve(record, baseline) -> PenetranceModel:
    """Approximate Weibull curve for one study, used for per-study plot series."""
    if record.modality == PENETRANCE:
        return fit_weibull_to_curve(record.ages, record.estimate)
    grid = _conversion_grid(baseline)
    risk = rr_or_to_penetrance(record.modality, record.estimate, grid, np.asarray(baseline.cdf(grid)))
    keep = np.concatenate([[True], np.diff(risk) > 0]) & (risk > 0) & (risk < 1)
    return fit_weibull_to_curve(grid[keep], risk[keep])


def cmd_plotdata(args) -> dict[str, str]:
    if not (args.posterior or args.consensus or args.studies):
        raise CliError("plotdata needs --posterior, --consensus or --studies")
    grid = np.asarray(args.ages, float)
    rows = []
    if args.posterior:
        post = _read_table(args.posterior)
        shape = np.asarray(post["kappa"], float)
        scale = np.asarray(post["lambda"], float)
        curves = weibull_cdf_values(grid[None, :], shape[:, None], scale[:, None])
        series = {"consensus": curves.mean(axis=0)}
        if args.bands:
            series["consensus_lower"], series["consensus_upper"] = np.percentile(curves, [2.5, 97.5], axis=0)
        for name, vals in series.items():
            rows += [[name, _age(a), _num(v)] for a, v in zip(grid, vals)]
    elif args.consensus:
        table = _read_table(args.consensus)
        rows += [["consensus", a, v] for a, v in zip(table["age"], table["mean"])]
    if args.studies:
        baseline = _baseline(args.baseline)
        for record in _load(args.studies):
            try:
                model = study_curve(record, baseline)
            except ValueError as exc:
                raise CliError(f"study {record.id}: cannot fit a Weibull curve ({exc})") from None
            rows += [[f"study:{record.id}", _age(a), _num(v)] for a, v in zip(grid, model.cdf(grid))]
        if args.bands:
            base = np.asarray(baseline.cdf(grid), float)
            rows += [["baseline", _age(a), _num(v)] for a, v in zip(grid, base)]
    return {
        "plotdata.csv": _csv(["series", "age", "value"], rows),
        "manifest.json": _manifest("plotdata", args, None),
    }


# --- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="penmeta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ages=DEFAULT_AGES):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ages", type=_ages, default=tuple(ages), help="e.g. 40,50,60 or 20:90:1")
        p.add_argument("--threads", type=int, default=_threads_default(),
                       help="worker processes (default: $PENMETA_THREADS or 1)")

    def study_inputs(p):
        p.add_argument("--studies", required=True, help="JSON or CSV study file")
        p.add_argument("--baseline", default=DEFAULT_BASELINE,
                       help="non-carrier risk: CSV table path or weibull:SHAPE,SCALE[,TRUNCATION]")
        p.add_argument("--default-age", type=_age_dist, default=AgeDistribution(63.0, 14.00726),
                       help="MEAN,SD used for unreported age summaries")
        p.add_argument("--covariance-draws", type=int, default=10_000_000)

    p = sub.add_parser("meta", help="Bayesian hierarchical meta-analysis")
    common(p)
    study_inputs(p)
    p.add_argument("--iters", type=int, default=30_000)
    p.add_argument("--burnin", type=int, default=15_000)
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--thin", type=int, default=1)
    p.set_defaults(func=cmd_meta)

    p = sub.add_parser("fixed", help="fixed-effects maximum-likelihood curve")
    common(p)
    study_inputs(p)
    p.set_defaults(func=cmd_fixed)

    p = sub.add_parser("simulate", help="simulation study with MSE and coverage")
    common(p)
    p.add_argument("--preset", choices=["atm", "palb2"], default="atm")
    p.add_argument("--config", help="JSON simulation config (overrides --preset)")
    p.add_argument("--scenario", type=int, choices=[1, 2], default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--burnin", type=int, default=None)
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--desk-scale", action="store_true",
                   help="50 replicates, 200k populations, 6000 iterations")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="true mixture penetrance for a preset")
    common(p)
    p.add_argument("--preset", choices=["atm", "palb2"], default="atm")
    p.add_argument("--draws", type=int, default=1_000_000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plotdata", help="long-format curves for external plotting")
    common(p, ages=tuple(float(a) for a in range(20, 91)))
    p.add_argument("--posterior", help="posterior.csv from `penmeta meta`")
    p.add_argument("--consensus", help="consensus.csv (used when no posterior is given)")
    p.add_argument("--studies", help="study file for per-study approximate curves")
    p.add_argument("--baseline", default=DEFAULT_BASELINE)
    p.add_argument("--bands", action="store_true", help="also emit interval and baseline series")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        files = args.func(args)
        write_outputs(args.out, files)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    for name in files:
        print(Path(args.out) / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
