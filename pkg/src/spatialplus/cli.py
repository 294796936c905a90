"""Command-line interface: ``simulate``, ``fit``, ``study`` and ``basis``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags. The resolved settings are echoed to
every manifest. The output directory defaults to ``$SPATIALPLUS_OUTDIR`` or
the current directory.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 convergence, 6 study.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .basis import LocationSet, reparameterized_design
from .bayes.fit import fit_lambda_m_prior, fit_spatial_plus_bayes, fit_standard_spatial_bayes
from .bayes.model import PriorConfig
from .bayes.nuts import MCMCConfig
from .data import dataset_to_csv, fmt_float, read_dataset_csv, write_meta
from .errors import (
    ConvergenceError,
    DataError,
    NumericError,
    ParameterError,
    SpatialPlusError,
    StudyError,
)
from .fieldgen import generate, sample_grid_locations
from .frequentist import fit_spatial_freq, fit_spatial_plus_freq
from .harness import MODELS, StudyConfig, run_study, summarize_tables, write_study_outputs

log = logging.getLogger("spatialplus")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CONVERGENCE = 5
EXIT_STUDY = 6

OUTDIR_ENV = "SPATIALPLUS_OUTDIR"
DEFAULT_SEED = 0


class UsageError(ParameterError):
    pass


# option table: (section, key, type, default); flags use the key with dashes
def _str_list(text):
    return [v for v in str(text).replace(",", " ").split()]


OPTIONS = {
    "scenario": [
        ("family", str, "uni"),
        ("scenario", int, 1),
        ("n", int, 300),
        ("seed", int, DEFAULT_SEED),
        ("grid_side", int, None),
        ("fit_basis", int, None),
    ],
    "fit": [
        ("data", str, None),
        ("model", str, "spatial"),
        ("engine", str, "freq"),
        ("k", int, None),
        ("criterion", str, "reml"),
        ("seed", int, DEFAULT_SEED),
    ],
    "study": [
        ("family", str, "uni"),
        ("scenario", int, 1),
        ("n", int, 300),
        ("k", int, 150),
        ("replicates", int, 20),
        ("models", _str_list, list(MODELS)),
        ("root_seed", int, DEFAULT_SEED),
        ("criterion", str, "reml"),
        ("grid_side", int, None),
        ("confounder_cap", str, "matched"),
        ("workers", int, 1),
    ],
    "basis": [
        ("locations", str, None),
        ("grid_n", int, 20),
        ("k", int, 5),
        ("seed", int, DEFAULT_SEED),
    ],
    "mcmc": [
        ("chains", int, 2),
        ("warmup", int, 1000),
        ("draws", int, 1000),
        ("target_accept", float, 0.8),
        ("max_treedepth", int, 10),
    ],
    "prior": [
        ("sigma_scale", float, 10.0),
        ("sigma_x_scale", float, 10.0),
        ("xi_scale", float, 100.0),
        ("xi_x_scale", float, 1.0),
        ("tau_scale_standard_model", float, 100.0),
    ],
}

COMMAND_SECTIONS = {
    "simulate": ("scenario",),
    "fit": ("fit", "mcmc", "prior"),
    "study": ("study", "mcmc", "prior"),
    "basis": ("basis",),
}


def _add_section_flags(parser, section):
    group = parser.add_argument_group(section)
    for key, typ, default in OPTIONS[section]:
        flag = "--" + key.replace("_", "-")
        kwargs = {"dest": f"{section}.{key}", "default": None}
        if typ is _str_list:
            kwargs["nargs"] = "+"
        else:
            kwargs["type"] = typ
        shown = " ".join(default) if isinstance(default, list) else default
        group.add_argument(flag, help=f"default: {shown}", **kwargs)


def resolve(args, command):
    """Merge defaults, the optional INI file and flags into a nested dict."""
    parser = configparser.ConfigParser()
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        parser.read(args.config, encoding="utf-8")
    out = {}
    for section in COMMAND_SECTIONS[command]:
        vals = {}
        for key, typ, default in OPTIONS[section]:
            v = default
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    v = typ(raw)
                except ValueError as exc:
                    raise UsageError(f"config [{section}] {key}: bad value {raw!r}") from exc
            flag = getattr(args, f"{section}.{key}")
            if flag is not None:
                v = flag
            vals[key] = v
        out[section] = vals
    return out


def _outdir(args):
    d = args.outdir or os.environ.get(OUTDIR_ENV) or "."
    os.makedirs(d, exist_ok=True)
    if not os.access(d, os.W_OK):
        raise UsageError(f"output directory is not writable: {d}")
    return d


def _mcmc(cfg):
    try:
        return MCMCConfig(**cfg["mcmc"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc


def _prior(cfg):
    try:
        return PriorConfig(**cfg["prior"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# commands --------------------------------------------------------------------

def cmd_simulate(args):
    cfg = resolve(args, "simulate")
    sc = cfg["scenario"]
    if sc["family"] not in ("uni", "bi"):
        raise UsageError(f"--family must be 'uni' or 'bi', got {sc['family']!r}")
    if sc["scenario"] not in (1, 2, 3):
        raise UsageError(f"--scenario must be one of {{1, 2, 3}}, got {sc['scenario']}")
    outdir = _outdir(args)
    data = generate(sc["family"], sc["scenario"], sc["n"], sc["seed"], sc["grid_side"],
                    sc["fit_basis"])
    dataset_to_csv(data, os.path.join(outdir, "dataset.csv"))
    meta = {
        "version": __version__,
        "family": sc["family"],
        "scenario": sc["scenario"],
        "n": sc["n"],
        "seed": sc["seed"],
        "grid_side": sc["grid_side"],
        "fit_basis": sc["fit_basis"],
        "beta_true": " ".join(fmt_float(b) for b in data.beta_true),
    }
    meta.update({f"mean_{k}": fmt_float(v) for k, v in data.column_means.items()})
    write_meta(os.path.join(outdir, "dataset.meta"), meta)
    print(f"seed = {sc['seed']}")
    print(f"wrote {os.path.join(outdir, 'dataset.csv')}")
    return EXIT_OK


FIT_COLUMNS = ["model", "engine", "coefficient", "estimate", "sd", "ci_low", "ci_high",
               "lambda", "edf", "sigma2_hat", "criterion"]


def _default_k(n):
    return min(150, n - 3)


def _draws_to_csv(path_prefix, draws):
    cols = draws.scalar_columns()
    names = list(cols)
    paths = []
    for c in range(draws.n_chains):
        path = f"{path_prefix}_chain{c + 1}.csv"
        rows = [[fmt_float(cols[nm][c, i]) for nm in names] for i in range(draws.n_draws)]
        _write_rows(path, names, rows)
        paths.append(path)
    return paths


def _rhat_dict(draws):
    return {k: (None if v is None else round(float(v), 6)) for k, v in draws.rhat_table().items()}


def cmd_fit(args):
    cfg = resolve(args, "fit")
    f = cfg["fit"]
    if f["data"] is None:
        raise UsageError("--data is required")
    if f["model"] not in ("spatial", "spatial-plus"):
        raise UsageError(f"--model must be 'spatial' or 'spatial-plus', got {f['model']!r}")
    if f["engine"] not in ("freq", "bayes"):
        raise UsageError(f"--engine must be 'freq' or 'bayes', got {f['engine']!r}")
    outdir = _outdir(args)
    raw = read_dataset_csv(f["data"])
    data = raw.centered()
    k = f["k"] if f["k"] is not None else _default_k(data.n)
    basis = reparameterized_design(data.locations, k)
    manifest = {
        "command": "fit",
        "version": __version__,
        "resolved_config": {**cfg, "fit": {**f, "k": k}},
        "centering": {"applied": True, "column_means": data.column_means},
        "n": data.n,
        "p": data.p,
    }
    label = f"{f['model']}/{f['engine']}"
    extra = ["", "", "", ""]
    if f["engine"] == "freq":
        if f["model"] == "spatial":
            fit = fit_spatial_freq(data, basis, f["criterion"])
        else:
            res = fit_spatial_plus_freq(data, basis, f["criterion"])
            fit = res.stage2
            manifest["lambda_x"] = [s.lam for s in res.stage1]
        manifest["lambda"] = fit.lam
        lo, hi = fit.ci
        est, sd = fit.beta, fit.se
        extra = [fmt_float(fit.lam), fmt_float(fit.edf), fmt_float(fit.sigma2_hat), fit.criterion]
    else:
        mcmc, prior = _mcmc(cfg), _prior(cfg)
        manifest.update({"seed": f["seed"], "mcmc": mcmc.as_dict()})
        manifest["prior_convention"] = "half-normal HN(0, a) with a the scale of the underlying normal"
        std = fit_standard_spatial_bayes(data, basis, f["seed"], mcmc, prior)
        if f["model"] == "spatial":
            draws = std
        else:
            phi = fit_lambda_m_prior(std.lam)
            manifest["phi_hat"] = phi
            manifest["lambda_m_prior_fit"] = (
                "forward KL from the standard-model lambda draws (maximum likelihood): "
                "phi = sqrt(mean(lambda^2))"
            )
            manifest["standard_rhat"] = _rhat_dict(std)
            draws = fit_spatial_plus_bayes(data, basis, prior.with_lambda_m_scale(phi),
                                           f["seed"] + 1, mcmc)
            manifest["plus_seed"] = f["seed"] + 1
        manifest["prior"] = draws.prior.as_dict()
        manifest["rhat"] = _rhat_dict(draws)
        manifest["flags"] = draws.flags
        manifest["sampler_stats"] = draws.sampler_stats
        manifest["draw_files"] = [os.path.basename(p) for p in
                                  _draws_to_csv(os.path.join(outdir, "draws"), draws)]
        s = draws.beta_summary()
        est, sd, lo, hi = s["mean"], s["sd"], s["ci_low"], s["ci_high"]
        extra[0] = fmt_float(float(np.median(draws.lam)))
    rows = [
        [f["model"], f["engine"], f"beta_{j + 1}", fmt_float(est[j]), fmt_float(sd[j]),
         fmt_float(lo[j]), fmt_float(hi[j]), *extra]
        for j in range(data.p)
    ]
    _write_rows(os.path.join(outdir, "fit_summary.csv"), FIT_COLUMNS, rows)
    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    for r in rows:
        print(f"{label} {r[2]}: estimate {float(r[3]):.4f}  sd {float(r[4]):.4f}  "
              f"95% [{float(r[5]):.4f}, {float(r[6]):.4f}]")
    return EXIT_OK


def study_config_from(cfg):
    st = cfg["study"]
    if st["replicates"] < 1:
        raise UsageError(f"--replicates must be at least 1, got {st['replicates']}")
    try:
        return StudyConfig(
            family=st["family"], scenario=st["scenario"], n=st["n"], k_basis=st["k"],
            n_replicates=st["replicates"], models=tuple(st["models"]),
            root_seed=st["root_seed"], mcmc=_mcmc(cfg), prior=_prior(cfg),
            criterion=st["criterion"], grid_side=st["grid_side"],
            confounder_cap=st["confounder_cap"], workers=st["workers"],
        )
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc


def cmd_study(args):
    cfg = resolve(args, "study")
    scfg = study_config_from(cfg)
    outdir = _outdir(args)

    def progress(res):
        log.info("replicate %d done", res.index)

    try:
        summary = run_study(scfg, progress=progress)
    except StudyError as exc:
        partial = getattr(exc, "summary", None)
        if partial is not None:
            write_study_outputs(partial, outdir, resolved=cfg)
        raise StudyError(f"study {scfg.family}-{scfg.scenario} (n = {scfg.n}): {exc}") from exc
    write_study_outputs(summary, outdir, resolved=cfg)
    print(summarize_tables(summary)[1], end="")
    return EXIT_OK


def _read_locations(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in ("s1", "s2"):
        if col not in header:
            raise DataError(f"{path}: missing required column '{col}'")
    i1, i2 = header.index("s1"), header.index("s2")
    coords = np.empty((len(rows) - 1, 2))
    for r, row in enumerate(rows[1:]):
        try:
            coords[r] = float(row[i1]), float(row[i2])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: row {r + 1} has non-numeric coordinates") from exc
    return LocationSet(coords)


def cmd_basis(args):
    cfg = resolve(args, "basis")
    b = cfg["basis"]
    outdir = _outdir(args)
    if b["locations"]:
        locs = _read_locations(b["locations"])
    else:
        locs = sample_grid_locations(b["grid_n"], seed=b["seed"])
    basis = reparameterized_design(locs, b["k"])
    _write_rows(os.path.join(outdir, "eigenvalues.csv"), ["index", "eigenvalue"],
                [[j + 1, fmt_float(w)] for j, w in enumerate(basis.eigenvalues)])
    header = ["s1", "s2"] + [f"V{j + 1}" for j in range(basis.k)] + [f"U{j + 1}" for j in range(basis.q)]
    rows = [[fmt_float(v) for v in (*locs.coords[i], *basis.V[i], *basis.U[i])] for i in range(locs.n)]
    _write_rows(os.path.join(outdir, "basis.csv"), header, rows)
    _write_json(os.path.join(outdir, "manifest.json"), {
        "command": "basis", "version": __version__, "resolved_config": cfg,
        "n": locs.n, "k": basis.k, "q": basis.q,
    })
    print(f"k = {basis.k}, q = {basis.q}, n = {locs.n}")
    return EXIT_OK


# entry point -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="spatialplus",
        description="Spatial+ regression: simulate confounded data, fit models, run studies.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with per-module sections")
    common.add_argument("--outdir", help=f"output directory (default: ${OUTDIR_ENV} or .)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate a scenario dataset",
        "fit": "fit a model to a CSV dataset",
        "study": "run a replicated simulation study",
        "basis": "dump a thin-plate regression spline basis",
    }
    for name, sections in COMMAND_SECTIONS.items():
        p = sub.add_parser(name, parents=[common], help=helps[name])
        for section in sections:
            _add_section_flags(p, section)
    return parser


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "study": cmd_study, "basis": cmd_basis}


def _exit_code(exc):
    # order matters: RankError and CapacityError are parameter errors
    if isinstance(exc, StudyError):
        return EXIT_STUDY
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_USAGE


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except SpatialPlusError as exc:
        print(f"spatialplus {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
