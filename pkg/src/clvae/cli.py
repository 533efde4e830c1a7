"""Command-line interface: ``clvae <subcommand> [options]``.

Settings resolve in three layers: built-in defaults, then the section of an
INI file given with ``--config`` that is named after the subcommand, then
explicit flags. The resolved settings are printed to stderr and written next
to every artifact as ``<artifact>.config.ini``, which can be passed back with
``--config`` to repeat the run.

Environment: ``CLVAE_OUTPUT_DIR`` is prepended to relative output paths and
``CLVAE_THREADS`` caps the BLAS thread pool.

Failures print one line, ``error: <category>: <message>``, and exit with
status 1. Usage errors exit with status 2.
"""
import argparse
import configparser
import datetime as dt
import io
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ._io import atomic_write_frame, atomic_write_text
from .baseline import GGParams, ParetoNBDParams, fit_gg, fit_pnbd, read_params, write_params
from .evaluation import DEFAULT_GG, DEFAULT_PNBD, MODELS, SYNTHETIC_START, generate_synthetic, run_benchmark
from .exceptions import CLVAEError, ConfigError
from .ingest import (
    CohortSpec,
    ColumnMapping,
    attach_covariate_frame,
    build_cohort_covariates,
    holdout_revenue,
    parse_transaction_log,
    read_summaries,
    summarize_rfm,
    write_holdout,
    write_summaries,
)
from .model import CLVAE, PriorParams
from .predict import SimConfig, write_draws, write_report

logger = logging.getLogger("clvae")

OUTPUT_DIR_ENV = "CLVAE_OUTPUT_DIR"
THREADS_ENV = "CLVAE_THREADS"


# --------------------------------------------------------------------------
# option parsing helpers
# --------------------------------------------------------------------------


def _floats(text):
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _strs(text):
    return tuple(v for v in str(text).replace(" ", "").split(",") if v)


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _show(value):
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str
    output: bool = False


COLUMN_OPTS = [
    Opt("id_column", str, "customer_id", "customer id column name"),
    Opt("date_column", str, "date", "date column name (ISO YYYY-MM-DD)"),
    Opt("amount_column", str, "amount", "amount column name"),
    Opt("delimiter", str, ",", "field delimiter"),
]

TRAIN_OPTS = [
    Opt("learning_rate", float, 1e-3, "Adam learning rate"),
    Opt("batch_size", int, 64, "mini-batch size"),
    Opt("max_epochs", int, 1000, "maximum training epochs"),
    Opt("mc_samples", int, 10, "Monte Carlo samples per ELBO evaluation"),
    Opt("patience", int, 100, "early-stopping patience in epochs"),
    Opt("validation_fraction", float, 0.1, "share of customers held out for validation"),
    Opt("encoder_widths", _ints, (64, 32), "encoder hidden widths"),
    Opt("decoder_widths", _ints, (32, 64), "decoder hidden widths"),
    Opt("normalize", _bool, True, "standardise encoder inputs"),
    Opt("decoder_skip", _bool, True, "residual identity path in the decoder"),
]

COMMANDS = {
    "ingest": [
        Opt("transactions", str, None, "transaction log file"),
        Opt("calibration_end", str, None, "calibration end: ISO date or day offset from the first date"),
        Opt("out", str, "summaries.csv", "summaries output file", output=True),
        *COLUMN_OPTS,
        Opt("cohorts", _bool, False, "attach one-hot acquisition cohort columns"),
        Opt("cohort_granularity", int, 1, "cohort bin width in months"),
        Opt("cohort_bins", int, 24, "number of cohort bins"),
        Opt("holdout_out", str, "", "optional holdout revenue output file", output=True),
        Opt("horizons", _floats, (52.0, 104.0, 156.0, 208.0), "holdout horizons in weeks"),
    ],
    "fit-baseline": [
        Opt("summaries", str, None, "summaries file"),
        Opt("out", str, "baseline.json", "parameter document output", output=True),
    ],
    "fit-clvae": [
        Opt("summaries", str, None, "summaries file"),
        Opt("out", str, "clvae.npz", "checkpoint output", output=True),
        Opt("log_out", str, "", "training log output (default <out>.log.csv)", output=True),
        Opt("prior", str, "", "baseline parameter document to use as prior (default: fit one)"),
        Opt("seed", int, 50, "master seed"),
        *TRAIN_OPTS,
    ],
    "predict": [
        Opt("checkpoint", str, None, "CLVAE checkpoint"),
        Opt("summaries", str, None, "summaries file"),
        Opt("out", str, "predictions.csv", "report output", output=True),
        Opt("horizons", _floats, (52.0, 104.0, 156.0, 208.0), "horizons in weeks"),
        Opt("draws", int, 500, "simulated futures per customer"),
        Opt("seed", int, 50, "simulation seed"),
        Opt("quantiles", _floats, (), "revenue quantile columns, e.g. 0.1,0.9"),
        Opt("draws_out", str, "", "optional long-format draws output", output=True),
    ],
    "evaluate": [
        Opt("transactions", str, None, "transaction log file"),
        Opt("calibration_end", str, None, "calibration end: ISO date or day offset from the first date"),
        Opt("out", str, "benchmark", "output stem (<stem>.csv and <stem>.json)", output=True),
        *COLUMN_OPTS,
        Opt("horizons", _floats, (52.0, 104.0, 156.0, 208.0), "horizons in weeks"),
        Opt("models", _strs, ("pnbd_gg", "clvae"), "models to score: " + ",".join(MODELS)),
        Opt("seed", int, 50, "master seed"),
        Opt("draws", int, 500, "simulated futures per customer"),
        Opt("cohort_granularity", int, 1, "cohort bin width in months"),
        Opt("cohort_bins", int, 24, "number of cohort bins"),
        *TRAIN_OPTS,
    ],
    "simulate": [
        Opt("out", str, "synthetic.csv", "transaction log output", output=True),
        Opt("truth_out", str, "", "latent truth output (default <out>.truth.csv)", output=True),
        Opt("customers", int, 1000, "number of customers"),
        Opt("window", float, 208.0, "observation window in weeks"),
        Opt("acquisition", str, "uniform24", "uniform24 or day0"),
        Opt("seed", int, 50, "generator seed"),
        Opt("pnbd", _floats, tuple(vars(DEFAULT_PNBD).values()), "r,alpha,s,beta"),
        Opt("gg", _floats, tuple(vars(DEFAULT_GG).values()), "p,q,gamma"),
        Opt("lambda_mixture", str, "", "w:shape:rate;w:shape:rate replaces Gamma(r, alpha)"),
    ],
}


def build_parser():
    parser = argparse.ArgumentParser(prog="clvae", description="CLVAE customer-lifetime-value toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for command, opts in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help=f"INI file; settings read from its [{command}] section")
        for opt in opts:
            flag = "--" + opt.name.replace("_", "-")
            required = " (required)" if opt.default is None else f" (default {_show(opt.default)})"
            p.add_argument(flag, dest=opt.name, default=None, help=opt.help + required)
    return parser


def resolve(command, args):
    """Merge defaults, the config file section and flags into one dict."""
    section = {}
    if args.config:
        cp = configparser.ConfigParser()
        with open(args.config) as fh:
            cp.read_file(fh)
        if cp.has_section(command):
            section = dict(cp.items(command))
    known = {o.name for o in COMMANDS[command]}
    unknown = {k.replace("-", "_") for k in section} - known
    if unknown:
        raise ConfigError(f"unknown settings in [{command}]: {sorted(unknown)}")
    section = {k.replace("-", "_"): v for k, v in section.items()}
    resolved = {}
    for opt in COMMANDS[command]:
        raw = getattr(args, opt.name)
        if raw is None:
            raw = section.get(opt.name)
        if raw is None:
            if opt.default is None:
                raise ConfigError(f"--{opt.name.replace('_', '-')} is required")
            resolved[opt.name] = opt.default
            continue
        try:
            resolved[opt.name] = opt.type(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {opt.name}: {exc}") from None
    out_dir = os.environ.get(OUTPUT_DIR_ENV)
    if out_dir:
        for opt in COMMANDS[command]:
            path = resolved[opt.name]
            if opt.output and path and not os.path.isabs(path):
                resolved[opt.name] = os.path.join(out_dir, path)
    return resolved


def config_text(command, cfg):
    cp = configparser.ConfigParser()
    cp[command] = {k: _show(v) for k, v in cfg.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _echo(command, cfg, *artifacts):
    text = config_text(command, cfg)
    sys.stderr.write(text)
    for path in artifacts:
        if path:
            atomic_write_text(f"{path}.config.ini", text)


def _calibration_day(log, value):
    try:
        return float(value)
    except ValueError:
        pass
    try:
        date = dt.date.fromisoformat(value)
    except ValueError:
        raise ConfigError(f"calibration_end {value!r} is neither a day offset nor an ISO date") from None
    return float((date - log.start_date).days)


def _columns(cfg):
    return ColumnMapping(cfg["id_column"], cfg["date_column"], cfg["amount_column"], cfg["delimiter"])


def _clvae_params(cfg):
    return {
        "learning_rate": cfg["learning_rate"], "batch_size": cfg["batch_size"], "max_epochs": cfg["max_epochs"],
        "mc_samples": cfg["mc_samples"], "patience": cfg["patience"],
        "validation_fraction": cfg["validation_fraction"], "encoder_widths": cfg["encoder_widths"],
        "decoder_widths": cfg["decoder_widths"], "normalize": cfg["normalize"],
        "decoder_skip": cfg["decoder_skip"], "random_state": cfg["seed"],
    }


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_ingest(cfg):
    log = parse_transaction_log(cfg["transactions"], _columns(cfg))
    cal_end = _calibration_day(log, cfg["calibration_end"])
    cal_log = log.truncate(cal_end)
    summaries = summarize_rfm(cal_log, cal_end)
    if cfg["cohorts"]:
        spec = CohortSpec(cfg["cohort_granularity"], cfg["cohort_bins"])
        cov = build_cohort_covariates(cal_log, spec, customers=summaries["customer_id"])
        summaries = attach_covariate_frame(summaries, cov)
    write_summaries(summaries, cfg["out"])
    outputs = [cfg["out"]]
    if cfg["holdout_out"]:
        table = holdout_revenue(log, cal_end, cfg["horizons"], customers=summaries["customer_id"])
        write_holdout(table, cfg["holdout_out"])
        outputs.append(cfg["holdout_out"])
    _echo("ingest", cfg, *outputs)
    logger.info("%d customers summarised, %d zero-repeaters", len(summaries), int((summaries["x"] == 0).sum()))


def cmd_fit_baseline(cfg):
    summaries = read_summaries(cfg["summaries"])
    pnbd, gg = fit_pnbd(summaries), fit_gg(summaries)
    write_params(cfg["out"], pnbd, gg, extra={"fit-baseline": {k: _show(v) for k, v in cfg.items()}})
    _echo("fit-baseline", cfg)


def cmd_fit_clvae(cfg):
    summaries = read_summaries(cfg["summaries"])
    prior = None
    if cfg["prior"]:
        pnbd, gg, _ = read_params(cfg["prior"])
        prior = PriorParams.from_baseline(pnbd, gg)
    model = CLVAE(prior=prior, verbose=logger.isEnabledFor(logging.INFO), **_clvae_params(cfg)).fit(summaries)
    model.save(cfg["out"], extra_metadata={"run_config": {k: _show(v) for k, v in cfg.items()}})
    log_out = cfg["log_out"] or f"{cfg['out']}.log.csv"
    atomic_write_frame(model.training_log_, log_out, index=False, float_format="%.17g")
    _echo("fit-clvae", cfg, log_out)
    logger.info("best epoch %d, validation ELBO %.6f", model.best_epoch_, model.best_validation_elbo_)


def cmd_predict(cfg):
    model = CLVAE.load(cfg["checkpoint"])
    summaries = read_summaries(cfg["summaries"])
    keep = bool(cfg["quantiles"] or cfg["draws_out"])
    sim = SimConfig(horizons=cfg["horizons"], n_draws=cfg["draws"], seed=cfg["seed"], keep_draws=keep)
    result = model.simulate(summaries, sim)
    write_report(result, cfg["out"], quantiles=cfg["quantiles"] or None)
    outputs = [cfg["out"]]
    if cfg["draws_out"]:
        write_draws(result, cfg["draws_out"])
        outputs.append(cfg["draws_out"])
    _echo("predict", cfg, *outputs)


def cmd_evaluate(cfg):
    log = parse_transaction_log(cfg["transactions"], _columns(cfg))
    cal_end = _calibration_day(log, cfg["calibration_end"])
    report = run_benchmark(
        log, cal_end, horizons=cfg["horizons"], models=cfg["models"], clvae_params=_clvae_params(cfg),
        sim_params={"n_draws": cfg["draws"], "seed": cfg["seed"]},
        cohort_spec=CohortSpec(cfg["cohort_granularity"], cfg["cohort_bins"]), seed=cfg["seed"],
    )
    report.metadata["run_config"] = {k: _show(v) for k, v in cfg.items()}
    report.write(cfg["out"])
    _echo("evaluate", cfg, f"{cfg['out']}.csv")
    sys.stdout.write(report.table().to_string() + "\n")


def _mixture(text):
    if not text:
        return None
    try:
        return [tuple(float(v) for v in part.split(":")) for part in text.split(";") if part]
    except ValueError:
        raise ConfigError(f"bad lambda_mixture {text!r}; expected w:shape:rate;...") from None


def cmd_simulate(cfg):
    if len(cfg["pnbd"]) != 4 or len(cfg["gg"]) != 3:
        raise ConfigError("pnbd needs 4 values (r,alpha,s,beta) and gg 3 values (p,q,gamma)")
    log, truth = generate_synthetic(
        ParetoNBDParams(*cfg["pnbd"]), GGParams(*cfg["gg"]), n=cfg["customers"], window=cfg["window"],
        acquisition=cfg["acquisition"], rng=cfg["seed"], lambda_mixture=_mixture(cfg["lambda_mixture"]),
    )
    days = np.floor(log.frame["time"].to_numpy()).astype(int)
    dates = [(SYNTHETIC_START + dt.timedelta(days=int(d))).isoformat() for d in days]
    frame = pd.DataFrame({"customer_id": log.frame["customer_id"], "date": dates, "amount": log.frame["amount"]})
    atomic_write_frame(frame, cfg["out"], index=False, float_format="%.17g")
    truth_out = cfg["truth_out"] or f"{cfg['out']}.truth.csv"
    atomic_write_frame(truth, truth_out, float_format="%.17g")
    _echo("simulate", cfg, cfg["out"], truth_out)


HANDLERS = {
    "ingest": cmd_ingest,
    "fit-baseline": cmd_fit_baseline,
    "fit-clvae": cmd_fit_clvae,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}


def _limit_threads():
    threads = os.environ.get(THREADS_ENV)
    if not threads:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(threads))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {threads!r}") from None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        cfg = resolve(args.command, args)
        HANDLERS[args.command](cfg)
        if limiter is not None:
            limiter.restore_original_limits()
    except CLVAEError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"error: parse: malformed input document: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
