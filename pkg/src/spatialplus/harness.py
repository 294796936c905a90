"""Replicated simulation studies of the four spatial model variants.

A study draws ``n_replicates`` datasets from one scenario, fits each
requested model, and aggregates bias, reported spread and interval coverage
per model and coefficient. Replicate ``r`` is seeded from
``(root_seed, r)`` alone, so any replicate can be rerun in isolation and the
aggregate does not depend on execution order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .basis import reparameterized_design
from .bayes.fit import fit_lambda_m_prior, fit_spatial_plus_bayes, fit_standard_spatial_bayes
from .bayes.model import PriorConfig
from .bayes.nuts import MCMCConfig
from .data import fmt_float
from .errors import ParameterError, SpatialPlusError, StudyError
from .fieldgen import generate, replicate_seed
from .frequentist import fit_spatial_freq, fit_spatial_plus_freq

log = logging.getLogger(__name__)

MODELS = ("frequentist", "bayesian", "frequentist+", "bayesian+")
MAX_FAILURE_FRACTION = 0.2
CONFOUNDER_CAPS = ("matched", "fixed")

SUMMARY_COLUMNS = (
    "family", "scenario", "model", "coefficient", "beta_true", "n_used", "n_failed",
    "n_flagged", "mean_bias", "median_bias", "mean_spread", "sd_estimate", "coverage",
)
REPLICATE_COLUMNS = (
    "replicate", "seed", "model", "coefficient", "beta_true", "estimate", "bias", "spread",
    "ci_low", "ci_high", "covered", "status", "flags",
)


@dataclass(frozen=True)
class StudyConfig:
    """One scenario, one sample size, several models.

    ``confounder_cap="matched"`` generates the high-frequency confounder on
    ``k_basis`` plus a small margin of basis functions; ``"fixed"`` uses the
    generator's default cap clamped to ``n - 3``.
    """

    family: str = "uni"
    scenario: int = 1
    n: int = 300
    k_basis: int = 150
    n_replicates: int = 20
    models: tuple = MODELS
    root_seed: int = 0
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    criterion: str = "reml"
    grid_side: int | None = None
    confounder_cap: str = "matched"
    workers: int = 1

    def __post_init__(self):
        if self.family not in ("uni", "bi"):
            raise ParameterError(f"family must be 'uni' or 'bi', got {self.family!r}")
        if int(self.scenario) not in (1, 2, 3):
            raise ParameterError(f"scenario must be one of {{1, 2, 3}}, got {self.scenario}")
        if self.n_replicates < 1:
            raise ParameterError(f"n_replicates must be at least 1, got {self.n_replicates}")
        if not 1 <= self.k_basis <= self.n - 3:
            raise ParameterError(
                f"k_basis must lie in [1, n - 3] = [1, {self.n - 3}], got {self.k_basis}"
            )
        models = tuple(self.models)
        bad = [m for m in models if m not in MODELS]
        if bad or not models:
            raise ParameterError(f"models must be a nonempty subset of {MODELS}, got {models}")
        object.__setattr__(self, "models", tuple(m for m in MODELS if m in models))
        if self.criterion not in ("reml", "gcv"):
            raise ParameterError(f"criterion must be 'reml' or 'gcv', got {self.criterion!r}")
        if self.confounder_cap not in CONFOUNDER_CAPS:
            raise ParameterError(f"confounder_cap must be one of {CONFOUNDER_CAPS}")
        if self.workers < 1:
            raise ParameterError(f"workers must be at least 1, got {self.workers}")

    def as_dict(self):
        return {
            "family": self.family, "scenario": int(self.scenario), "n": self.n,
            "k_basis": self.k_basis, "n_replicates": self.n_replicates,
            "models": list(self.models), "root_seed": self.root_seed,
            "mcmc": self.mcmc.as_dict(), "prior": self.prior.as_dict(),
            "criterion": self.criterion, "grid_side": self.grid_side,
            "confounder_cap": self.confounder_cap,
        }


@dataclass(eq=False)
class ModelEstimate:
    """One model's result on one replicate; arrays are indexed by coefficient."""

    model: str
    estimate: np.ndarray | None = None
    spread: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    flags: list = field(default_factory=list)
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def status(self):
        if self.error is not None:
            return "failed"
        return "flagged" if self.flags else "ok"

    def covered(self, beta_true):
        return (self.ci_low <= beta_true) & (beta_true <= self.ci_high)


@dataclass(eq=False)
class ReplicateResult:
    index: int
    seed: int
    beta_true: np.ndarray
    estimates: dict  # model -> ModelEstimate


@dataclass(eq=False)
class CoefficientSummary:
    biases: np.ndarray
    spreads: np.ndarray
    covered: np.ndarray
    n_failed: int
    n_flagged: int

    @property
    def n_used(self):
        return int(self.biases.size)

    @property
    def mean_bias(self):
        return float(np.mean(self.biases)) if self.n_used else math.nan

    @property
    def median_bias(self):
        return float(np.median(self.biases)) if self.n_used else math.nan

    @property
    def mean_spread(self):
        return float(np.mean(self.spreads)) if self.n_used else math.nan

    @property
    def sd_estimate(self):
        # spread of the point estimates across replicates
        return float(np.std(self.biases, ddof=1)) if self.n_used > 1 else math.nan

    @property
    def coverage(self):
        return float(np.mean(self.covered)) if self.n_used else math.nan


@dataclass(eq=False)
class StudySummary:
    config: StudyConfig
    beta_true: np.ndarray
    cells: dict  # (model, coefficient index) -> CoefficientSummary
    replicates: list

    @property
    def n_replicates(self):
        return len(self.replicates)

    def cell(self, model, coefficient=0):
        return self.cells[(model, coefficient)]

    def failure_fraction(self, model):
        bad = sum(r.estimates[model].status != "ok" for r in self.replicates)
        return bad / max(len(self.replicates), 1)


# fitting -------------------------------------------------------------------

def _freq_estimate(name, fit):
    lo, hi = fit.ci
    return ModelEstimate(name, np.asarray(fit.beta, float), np.asarray(fit.se, float),
                         np.asarray(lo, float), np.asarray(hi, float))


def _bayes_estimate(name, draws, **extra):
    s = draws.beta_summary()
    return ModelEstimate(name, s["mean"], s["sd"], s["ci_low"], s["ci_high"],
                         flags=list(draws.flags), extra=dict(extra))


def _guard(name, fn):
    try:
        return fn()
    except SpatialPlusError as exc:
        log.warning("%s failed: %s", name, exc)
        return ModelEstimate(name, error=f"{type(exc).__name__}: {exc}")


def replicate_dataset(cfg, index):
    """Dataset and seed of replicate ``index``."""
    seed = replicate_seed(cfg.root_seed, index)
    fit_basis = cfg.k_basis if cfg.confounder_cap == "matched" else None
    data = generate(cfg.family, cfg.scenario, cfg.n, seed, cfg.grid_side, fit_basis)
    return data, seed


def run_replicate(cfg, index):
    """Fit every requested model on replicate ``index``."""
    data, seed = replicate_dataset(cfg, index)
    basis = reparameterized_design(data.locations, cfg.k_basis)
    out = {}
    if "frequentist" in cfg.models:
        out["frequentist"] = _guard("frequentist", lambda: _freq_estimate(
            "frequentist", fit_spatial_freq(data, basis, cfg.criterion)))
    if "frequentist+" in cfg.models:
        out["frequentist+"] = _guard("frequentist+", lambda: _freq_estimate(
            "frequentist+", fit_spatial_plus_freq(data, basis, cfg.criterion)))

    # the standard Bayesian fit doubles as the first pass of bayesian+
    std = None
    if "bayesian" in cfg.models or "bayesian+" in cfg.models:
        try:
            std = fit_standard_spatial_bayes(data, basis, seed, cfg.mcmc, cfg.prior)
            std_est = _bayes_estimate("bayesian", std)
        except SpatialPlusError as exc:
            std_est = ModelEstimate("bayesian", error=f"{type(exc).__name__}: {exc}")
        if "bayesian" in cfg.models:
            out["bayesian"] = std_est
    if "bayesian+" in cfg.models:
        if std is None:
            out["bayesian+"] = ModelEstimate("bayesian+", error=f"first pass failed: {std_est.error}")
        else:
            def plus():
                phi = fit_lambda_m_prior(std.lam)
                draws = fit_spatial_plus_bayes(
                    data, basis, cfg.prior.with_lambda_m_scale(phi), seed + 1, cfg.mcmc)
                return _bayes_estimate("bayesian+", draws, phi_hat=phi)
            out["bayesian+"] = _guard("bayesian+", plus)
    return ReplicateResult(index=index, seed=seed, beta_true=data.beta_true, estimates=out)


def _run_one(args):
    cfg, index = args
    return run_replicate(cfg, index)


def aggregate(cfg, results):
    """Combine replicate results into a :class:`StudySummary` (order-insensitive)."""
    results = sorted(results, key=lambda r: r.index)
    if not results:
        raise StudyError("no replicate results to aggregate")
    beta_true = results[0].beta_true
    cells = {}
    for model in cfg.models:
        ests = [r.estimates[model] for r in results]
        ok = [e for e in ests if e.status == "ok"]
        n_failed = sum(e.status == "failed" for e in ests)
        n_flagged = sum(e.status == "flagged" for e in ests)
        for j in range(beta_true.shape[0]):
            cells[(model, j)] = CoefficientSummary(
                biases=np.array([e.estimate[j] - beta_true[j] for e in ok]),
                spreads=np.array([e.spread[j] for e in ok]),
                covered=np.array([bool(e.covered(beta_true)[j]) for e in ok], dtype=bool),
                n_failed=n_failed,
                n_flagged=n_flagged,
            )
    return StudySummary(config=cfg, beta_true=beta_true, cells=cells, replicates=results)


def run_study(cfg, order=None, progress=None):
    """Run all replicates of ``cfg`` and aggregate them.

    Parameters
    ----------
    cfg : StudyConfig
    order : sequence of int, optional
        Execution order of replicate indices; defaults to ascending. The
        summary does not depend on it.
    progress : callable, optional
        Called with each finished :class:`ReplicateResult`.

    Raises
    ------
    StudyError
        If more than 20% of replicates fail or are flagged for any model.
        The partial summary is attached as ``exc.summary``.
    """
    indices = list(range(cfg.n_replicates)) if order is None else [int(i) for i in order]
    if sorted(indices) != list(range(cfg.n_replicates)):
        raise ParameterError("order must be a permutation of the replicate indices")
    results = []
    if cfg.workers > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for res in pool.map(_run_one, [(cfg, i) for i in indices]):
                results.append(res)
                if progress:
                    progress(res)
    else:
        for i in indices:
            res = run_replicate(cfg, i)
            results.append(res)
            if progress:
                progress(res)
    summary = aggregate(cfg, results)
    for model in cfg.models:
        frac = summary.failure_fraction(model)
        if frac > MAX_FAILURE_FRACTION:
            err = StudyError(
                f"{model}: {100 * frac:.0f}% of replicates failed or were flagged "
                f"({cfg.family} scenario {cfg.scenario}, n = {cfg.n})"
            )
            err.summary = summary
            raise err
    return summary


# tables ----------------------------------------------------------------------

def _fmt(v, digits):
    return "nan" if not np.isfinite(v) else f"{v:.{digits}f}"


def _column_label(cfg, j, p):
    label = f"{cfg.family}-{int(cfg.scenario)}"
    return f"{label} beta_{j + 1}" if p > 1 else label


def summarize_tables(summaries):
    """Coverage/bias tables for one or more study summaries.

    Returns ``(csv_text, text_table)``. Rows are models; columns are
    scenario and coefficient. Coverage is printed with 2 decimals and mean
    bias with 3.
    """
    if isinstance(summaries, StudySummary):
        summaries = [summaries]
    if not summaries:
        raise StudyError("nothing to summarize")
    columns = []
    for s in summaries:
        p = s.beta_true.shape[0]
        for j in range(p):
            columns.append((_column_label(s.config, j, p), s, j))
    models = [m for m in MODELS if any(m in s.config.models for s in summaries)]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + [f"{c[0]} coverage" for c in columns] + [f"{c[0]} bias" for c in columns])
    grid_cov, grid_bias = [], []
    for m in models:
        cov_row, bias_row = [], []
        for _, s, j in columns:
            if (m, j) in s.cells:
                cell = s.cells[(m, j)]
                cov_row.append(_fmt(cell.coverage, 2))
                bias_row.append(_fmt(cell.mean_bias, 3))
            else:
                cov_row.append("")
                bias_row.append("")
        w.writerow([m] + cov_row + bias_row)
        grid_cov.append(cov_row)
        grid_bias.append(bias_row)

    def block(title, grid):
        header = ["model"] + [c[0] for c in columns]
        rows = [[m] + r for m, r in zip(models, grid)]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
        fmt_row = lambda r: "  ".join(  # noqa: E731
            str(x).ljust(wd) if i == 0 else str(x).rjust(wd) for i, (x, wd) in enumerate(zip(r, widths))
        )
        lines = [title, fmt_row(header), "  ".join("-" * wd for wd in widths)]
        lines += [fmt_row(r) for r in rows]
        return "\n".join(lines)

    text = block("Coverage (95% intervals)", grid_cov) + "\n\n" + block("Mean bias", grid_bias) + "\n"
    return buf.getvalue(), text


# output files ----------------------------------------------------------------

def _num(v):
    return "nan" if v is None or not np.isfinite(v) else fmt_float(v)


def summary_rows(summary):
    cfg = summary.config
    rows = []
    for (model, j), cell in sorted(summary.cells.items(), key=lambda kv: (MODELS.index(kv[0][0]), kv[0][1])):
        rows.append({
            "family": cfg.family, "scenario": int(cfg.scenario), "model": model,
            "coefficient": j + 1, "beta_true": _num(summary.beta_true[j]),
            "n_used": cell.n_used, "n_failed": cell.n_failed, "n_flagged": cell.n_flagged,
            "mean_bias": _num(cell.mean_bias), "median_bias": _num(cell.median_bias),
            "mean_spread": _num(cell.mean_spread), "sd_estimate": _num(cell.sd_estimate),
            "coverage": _num(cell.coverage),
        })
    return rows


def replicate_rows(summary):
    rows = []
    for r in summary.replicates:
        for model in summary.config.models:
            e = r.estimates[model]
            for j, bt in enumerate(r.beta_true):
                ok = e.error is None
                rows.append({
                    "replicate": r.index, "seed": r.seed, "model": model, "coefficient": j + 1,
                    "beta_true": _num(bt),
                    "estimate": _num(e.estimate[j]) if ok else "nan",
                    "bias": _num(e.estimate[j] - bt) if ok else "nan",
                    "spread": _num(e.spread[j]) if ok else "nan",
                    "ci_low": _num(e.ci_low[j]) if ok else "nan",
                    "ci_high": _num(e.ci_high[j]) if ok else "nan",
                    "covered": int(bool(e.covered(r.beta_true)[j])) if ok else "",
                    "status": e.status,
                    "flags": "; ".join(e.flags) if ok else e.error,
                })
    return rows


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_study_outputs(summary, outdir, resolved=None):
    """Write ``study_summary.csv``, ``replicates.csv``, the tables and a manifest."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "summary": os.path.join(outdir, "study_summary.csv"),
        "replicates": os.path.join(outdir, "replicates.csv"),
        "tables": os.path.join(outdir, "study_tables.txt"),
        "manifest": os.path.join(outdir, "manifest.json"),
    }
    _write_csv(paths["summary"], SUMMARY_COLUMNS, summary_rows(summary))
    _write_csv(paths["replicates"], REPLICATE_COLUMNS, replicate_rows(summary))
    _, text = summarize_tables(summary)
    with open(paths["tables"], "w", encoding="utf-8") as fh:
        fh.write(text)
    manifest = {
        "command": "study",
        "version": __version__,
        "study": summary.config.as_dict(),
        "replicate_seeds": [r.seed for r in summary.replicates],
        "spread_columns": {
            "mean_spread": "mean over replicates of the reported posterior sd or standard error",
            "sd_estimate": "standard deviation of the point estimates across replicates",
        },
        "prior_convention": "half-normal HN(0, a) with a the scale of the underlying normal",
        "lambda_m_prior_fit": "forward KL from the standard-model smoothing draws (maximum likelihood)",
    }
    if resolved is not None:
        manifest["resolved_config"] = resolved
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths

