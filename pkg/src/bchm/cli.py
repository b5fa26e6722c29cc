"""Command line front end.

Each subcommand runs one stage of the calibration workflow and reads or
writes its artifacts below the output directory::

    inputs/      ensemble.csv, observations.csv, targets.json, truth.json
    model_temporal/, model/   boundary model manifests
    prior/       samples.csv, summary.json
    wave_<k>/    design.csv, outputs/ (per-spec CSV, runs.json keyed by design hash),
                 volume_series.csv, emulators/, loo/,
                 nroy_pool.csv, report.json, volume_fan.png
    report.json, fractions.png

CSV and JSON artifacts contain no timestamps or absolute paths, so reruns
with the same seed and configuration are byte-identical. Failures print a
JSON object on stderr and exit with the code of the failing module's error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import emulator as gp
from .basis import CentredEnsemble
from .boundary import (add_spatial_vectors, default_spatial_cov, default_temporal_cov,
                       fit_temporal_model, generate_boundary, load_model, save_model,
                       split_periods)
from .errors import BchmError, ConfigError, DataError, MissingInputError
from .history import (NroySpace, PriorSpace, RegionEmulation, ScalarEmulation, WavePredicate,
                      WaveState)
from .kron import save_field_csv
from .observations import ObservationSet
from .pipeline import PipelineSettings, Problem, advance_wave, load_output_table
from .synthetic import SyntheticConfig, ToySimulatorConfig, expert_pattern, synthetic_truth

log = logging.getLogger("bchm")

USAGE_EXIT = 64
INTERNAL_EXIT = 70

COMMANDS = ("synthetic", "fit-temporal", "fit-spatial", "generate", "prior-space", "design",
            "simulate", "wave", "report", "run")


class UsageError(BchmError):
    exit_code = USAGE_EXIT


# ------------------------------------------------------------------ config

def config_schema():
    return json.loads(resources.files("bchm.data").joinpath("config.schema.json").read_text())


@dataclass(frozen=True)
class Context:
    """Validated configuration plus resolved locations."""

    doc: dict
    base: Path
    out: Path
    seed: int

    def section(self, name):
        return self.doc.get(name, {})

    def input_path(self, key, default):
        p = self.section("inputs").get(key)
        return (self.base / p) if p else self.out / "inputs" / default

    @property
    def synthetic(self) -> SyntheticConfig:
        grid, syn, bnd = self.section("grid"), self.section("synthetic"), self.section("boundary")
        sim = ToySimulatorConfig(**{k: grid[k] for k in ("nx", "ny", "n_timesteps") if k in grid})
        kw = {k: syn[k] for k in ("n_members", "n_obs_locations", "obs_fraction", "truth_noise")
              if k in syn}
        if "obs_sd_range" in syn:
            kw["obs_sd_range"] = tuple(syn["obs_sd_range"])
        kw.update({k: bnd[k] for k in ("field_var", "spatial_length", "temporal_length", "n_t",
                                       "n_s", "expert_period") if k in bnd})
        if "prior_expand" in bnd:
            kw["prior_box_expand"] = bnd["prior_expand"]
        return SyntheticConfig(sim=sim, **kw)

    @property
    def settings(self) -> PipelineSettings:
        h = self.section("history")
        names = {f.name for f in fields(PipelineSettings)}
        return PipelineSettings(**{k: v for k, v in h.items() if k in names})

    @property
    def table(self):
        h = self.section("history")
        rows, waves = load_output_table(self.base / h["table"] if "table" in h else None)
        return self.doc.get("outputs", rows), self.doc.get("waves", waves)


def load_config(path=None, seed=None, out=None) -> Context:
    """Parse and validate a YAML configuration; command line flags override it."""
    doc, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        base = path.parent
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    seed = doc.get("seed", 0) if seed is None else seed
    out = Path(out) if out is not None else base / doc.get("out", "bchm-out")
    return Context(doc, base, out, int(seed))


# ---------------------------------------------------------------- file i/o

def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def read_csv(path):
    """Header and float body of a CSV written by ``write_csv``."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    try:
        body = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    except ValueError:
        raise DataError(f"{path}: non-numeric entry") from None
    return rows[0], body.reshape(len(rows) - 1, len(rows[0]))


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"file not found: {path}")
    return json.loads(path.read_text())


def _design_header(problem):
    return list(problem.cfg.sim.param_names) + list(problem.model.coefficient_names)


def _wave_dir(ctx, k):
    return ctx.out / f"wave_{k}"


# ------------------------------------------------------------ shared state

def _covariances(ctx: Context, obs: ObservationSet):
    cfg = ctx.synthetic
    sigma_s = default_spatial_cov(cfg.sim.coords, cfg.spatial_length, cfg.field_var)
    sigma_t = default_temporal_cov(cfg.sim.n_timesteps, cfg.temporal_length, cfg.field_var)
    return sigma_s, sigma_t, np.diag(obs.per_time_error_var())


def _load_inputs(ctx: Context):
    cfg = ctx.synthetic
    _, runs = read_csv(ctx.input_path("ensemble", "ensemble.csv"))
    ell = cfg.sim.n_cells * cfg.sim.n_timesteps
    if runs.shape[0] != ell:
        raise DataError(f"ensemble has {runs.shape[0]} rows, grid needs {ell}")
    obs = ObservationSet.from_csv(ctx.input_path("observations", "observations.csv"),
                                  cfg.sim.n_cells, cfg.sim.n_timesteps)
    return runs, obs


def _problem(ctx: Context) -> Problem:
    runs, obs = _load_inputs(ctx)
    model = load_model(ctx.out / "model")
    targets = read_json(ctx.input_path("targets", "targets.json"))
    rows, _ = ctx.table
    return Problem.from_inputs(ctx.synthetic, model, runs, obs, *_covariances(ctx, obs), rows,
                               targets)


def _load_prior(ctx: Context, problem: Problem):
    summary = read_json(ctx.out / "prior" / "summary.json")
    _, samples = read_csv(ctx.out / "prior" / "samples.csv")
    if samples.shape[0] == 0:
        raise ConfigError("coefficient space is empty; widen the prior box")
    return PriorSpace(samples, summary["n_drawn"], np.array(summary["lower"]),
                      np.array(summary["upper"]), summary["j"], summary["diagnostics"])


def _emulation_to_json(emu):
    if isinstance(emu, ScalarEmulation):
        return {"kind": "scalar", "emulator": gp.to_dict(emu.emulator)}
    g = emu.basis.vectors if hasattr(emu.basis, "vectors") else np.asarray(emu.basis)
    return {"kind": "binary", "basis": g.tolist(), "mean": np.asarray(emu.mean).tolist(),
            "emulators": [gp.to_dict(e) for e in emu.emulators]}


def _emulation_from_json(d):
    if d["kind"] == "scalar":
        return ScalarEmulation(gp.from_dict(d["emulator"]))
    return RegionEmulation(np.array(d["basis"], dtype=float), np.array(d["mean"], dtype=float),
                           tuple(gp.from_dict(e) for e in d["emulators"]))


def _load_state(ctx: Context, problem: Problem, prior, upto: int) -> WaveState:
    """History-matching state after ``upto`` completed waves, rebuilt from disk."""
    settings = ctx.settings
    state = problem.initial_state(prior, settings, ctx.seed)
    specs = {s.id: s for s in problem.specs}
    for w in range(1, upto + 1):
        d = _wave_dir(ctx, w)
        report = read_json(d / "report.json")
        emus = {sid: _emulation_from_json(read_json(d / "emulators" / f"{sid}.json"))
                for sid in report["specs"]}
        pred = WavePredicate(tuple(specs[sid] for sid in report["specs"]), emus,
                             report["combine"], report["j"], settings.m_samples,
                             ctx.seed * 1000 + w - 1)
        _, kept = read_csv(d / "nroy_pool.csv")
        mask = np.zeros(state.pool.shape[0], dtype=bool)
        mask[kept[:, 0].astype(int)] = True
        state = WaveState(w, NroySpace(w, pred, state.space), state.bounds, state.pool, mask,
                          state.base_fraction, state.fractions + (report["fraction"],),
                          state.reports + (report,))
    return state


# ------------------------------------------------------------------ plots

def _plot_fans(path, series_by_wave, targets, cfg):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    t = np.arange(cfg.sim.n_timesteps)
    for label, series in series_by_wave:
        q = np.quantile(series, [0.05, 0.25, 0.5, 0.75, 0.95], axis=0)
        band = ax.fill_between(t, q[0], q[4], alpha=0.2)
        ax.fill_between(t, q[1], q[3], alpha=0.3, color=band.get_facecolor()[0])
        ax.plot(t, q[2], color=band.get_facecolor()[0][:3], label=label)
    for tg in cfg.targets:
        if tg.kind == "scalar" and tg.id in targets:
            ax.errorbar(tg.time, targets[tg.id], yerr=3 * np.sqrt(tg.error_var), fmt="ko",
                        capsize=3)
    ax.set_xlabel("timestep")
    ax.set_ylabel("ice volume")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_fractions(path, fractions):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(range(len(fractions)), fractions, "o-")
    ax.set_xlabel("wave")
    ax.set_ylabel("NROY volume fraction")
    ax.set_xticks(range(len(fractions)))
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------- commands

def cmd_synthetic(ctx: Context, args):
    """Synthetic ensemble, records and calibration targets with a known truth."""
    cfg = ctx.synthetic
    truth = synthetic_truth(cfg, ctx.seed)
    d = ctx.out / "inputs"
    runs = truth.climate.runs
    write_csv(d / "ensemble.csv", [f"member_{i}" for i in range(runs.shape[1])], runs)
    d.mkdir(parents=True, exist_ok=True)
    truth.climate.obs.to_csv(d / "observations.csv")
    targets = {k: (float(v) if np.ndim(v) == 0 else np.asarray(v).astype(int).tolist())
               for k, v in truth.observations.items()}
    write_json(d / "targets.json", targets)
    write_json(d / "truth.json", {"seed": ctx.seed, "x_star": truth.x_star.tolist(),
                                  "c_star": truth.c_star.tolist()})
    return d


def _periods(ctx, n_times):
    b = ctx.section("boundary")
    if "periods" in b:
        return tuple(tuple(p) for p in b["periods"])
    return split_periods(n_times, b.get("n_periods", 3))


def cmd_fit_temporal(ctx: Context, args):
    """Temporal vectors of every period, fitted to the anchor records."""
    cfg = ctx.synthetic
    runs, obs = _load_inputs(ctx)
    ens = CentredEnsemble.from_runs(runs)
    b = ctx.section("boundary")
    anchor = b.get("anchor", int(np.argmax(np.bincount(obs.location, minlength=obs.n_locations))))
    model = fit_temporal_model(ens, obs, *_covariances(ctx, obs), _periods(ctx, obs.n_times),
                               [anchor], cfg.n_t,
                               min_direction_var=b.get("min_direction_var", 1e-4))
    return save_model(model, ctx.out / "model_temporal")


def cmd_fit_spatial(ctx: Context, args):
    """Spatial vectors on top of the temporal fit, plus the expert pattern if configured."""
    cfg = ctx.synthetic
    runs, obs = _load_inputs(ctx)
    model = load_model(ctx.out / "model_temporal")
    ens = CentredEnsemble.from_runs(runs)
    b = ctx.section("boundary")
    expert = (((expert_pattern(cfg), cfg.expert_period),)
              if cfg.expert_period is not None else ())
    sigma_s, _, _ = _covariances(ctx, obs)
    model = add_spatial_vectors(model, ens, obs, sigma_s, cfg.n_s,
                                min_direction_var=b.get("min_direction_var", 1e-4),
                                expert_vectors=expert)
    return save_model(model, ctx.out / "model")


def cmd_generate(ctx: Context, args):
    """Boundary field for one coefficient vector, conditioned on the records."""
    _, obs = _load_inputs(ctx)
    model = load_model(ctx.out / "model")
    if args.coefficients:
        c = np.atleast_1d(np.array(read_json(args.coefficients), dtype=float))
    else:
        c = np.zeros(model.n_coefficients)
    field = generate_boundary(model, c, obs, *_covariances(ctx, obs), mode=args.mode,
                              seed=[ctx.seed, 4])
    path = ctx.out / "boundary.csv"
    save_field_csv(path, field, model.n_times)
    return path


def cmd_prior_space(ctx: Context, args):
    """Sample the coefficient space consistent with the records."""
    problem = _problem(ctx)
    prior = problem.prior_space(ctx.settings, ctx.seed)
    d = ctx.out / "prior"
    write_csv(d / "samples.csv", list(problem.model.coefficient_names), prior.samples)
    write_json(d / "summary.json", {
        "n_drawn": prior.n_drawn, "n_accepted": int(prior.samples.shape[0]),
        "acceptance": prior.acceptance, "j": prior.j, "lower": prior.lower.tolist(),
        "upper": prior.upper.tolist(), "diagnostics": prior.diagnostics})
    if prior.samples.shape[0] == 0:
        raise ConfigError("coefficient space is empty; widen the prior box")
    return d / "summary.json"


def _write_design(ctx, problem, prior, state, wave):
    design = problem.design(state.space, prior.samples, ctx.settings, wave, ctx.seed)
    return write_csv(_wave_dir(ctx, wave) / "design.csv", _design_header(problem), design)


def cmd_design(ctx: Context, args):
    """Design points for a wave inside the current NROY space."""
    problem = _problem(ctx)
    prior = _load_prior(ctx, problem)
    state = _load_state(ctx, problem, prior, args.wave - 1)
    return _write_design(ctx, problem, prior, state, args.wave)


def cmd_simulate(ctx: Context, args):
    """Run the toy simulator at a wave's design points."""
    problem = _problem(ctx)
    d = _wave_dir(ctx, args.wave)
    _, design = read_csv(d / "design.csv")
    outputs, series = problem.simulate(design, ctx.settings.workers)
    for sid, y in outputs.items():
        if y.ndim == 1:
            write_csv(d / "outputs" / f"{sid}.csv", [sid], y[:, None])
        else:
            write_csv(d / "outputs" / f"{sid}.csv", [f"cell_{i}" for i in range(y.shape[1])], y)
    write_csv(d / "volume_series.csv", [f"t{t}" for t in range(series.shape[1])], series)
    runs = [{"index": i, "design_hash": hashlib.sha256(row.tobytes()).hexdigest()}
            for i, row in enumerate(np.ascontiguousarray(design))]
    write_json(d / "outputs" / "runs.json", {"specs": sorted(outputs), "runs": runs})
    return d / "outputs"


def _read_outputs(d, problem):
    out = {}
    for s in problem.specs:
        p = d / "outputs" / f"{s.id}.csv"
        if p.exists():
            _, y = read_csv(p)
            out[s.id] = y[:, 0] if s.kind == "scalar" else y
    return out


def cmd_wave(ctx: Context, args):
    """Emulate a wave's outputs, rule out space and design the next wave."""
    problem = _problem(ctx)
    prior = _load_prior(ctx, problem)
    _, waves = ctx.table
    k = args.wave
    if not 1 <= k <= len(waves):
        raise ConfigError(f"wave {k} outside 1..{len(waves)}")
    state = _load_state(ctx, problem, prior, k - 1)
    d = _wave_dir(ctx, k)
    _, design = read_csv(d / "design.csv")
    outputs = _read_outputs(d, problem)
    state, _, _ = advance_wave(problem, state, prior, waves[k - 1], ctx.settings, k, ctx.seed,
                               design=design, outputs=outputs)
    emus = state.space.predicate.emulations
    for sid, emu in emus.items():
        write_json(d / "emulators" / f"{sid}.json", _emulation_to_json(emu))
        (d / "loo").mkdir(parents=True, exist_ok=True)
        if isinstance(emu, ScalarEmulation):
            gp.write_loo_csv(emu.emulator, d / "loo" / f"{sid}.csv")
        else:
            for i, e in enumerate(emu.emulators):
                gp.write_loo_csv(e, d / "loo" / f"{sid}_{i}.csv")
    report = dict(state.reports[-1])
    report["fraction_se"] = float(state.fraction_se)
    report["n_pool_kept"] = int(state.pool_mask.sum())
    write_csv(d / "nroy_pool.csv", ["index"], np.flatnonzero(state.pool_mask)[:, None])
    write_json(d / "report.json", report)
    series_path = d / "volume_series.csv"
    if series_path.exists():
        targets = read_json(ctx.input_path("targets", "targets.json"))
        _plot_fans(d / "volume_fan.png", [(f"wave {k}", read_csv(series_path)[1])], targets,
                   problem.cfg)
    if k < len(waves) and state.pool_mask.any():
        _write_design(ctx, problem, prior, state, k + 1)
    return d / "report.json"


def cmd_report(ctx: Context, args):
    """Summary of all completed waves, with truth retention when the truth is known."""
    problem = _problem(ctx)
    prior = _load_prior(ctx, problem)
    n = 0
    while (_wave_dir(ctx, n + 1) / "report.json").exists():
        n += 1
    state = _load_state(ctx, problem, prior, n)
    summary = {"seed": ctx.seed, "n_waves": n, "fractions": list(state.fractions),
               "coefficient_acceptance": prior.acceptance, "waves": list(state.reports)}
    truth_path = ctx.input_path("truth", "truth.json")
    if truth_path.exists():
        t = read_json(truth_path)
        star = np.r_[t["x_star"], t["c_star"]][None, :]
        spaces, sp = [], state.space
        while sp is not None:
            spaces.append(sp)
            sp = sp.parent
        summary["truth_kept"] = [bool(s.contains(star)[0]) for s in reversed(spaces)]
    write_json(ctx.out / "report.json", summary)
    _plot_fractions(ctx.out / "fractions.png", state.fractions)
    fans = [(f"wave {w}", read_csv(_wave_dir(ctx, w) / "volume_series.csv")[1])
            for w in range(1, n + 1) if (_wave_dir(ctx, w) / "volume_series.csv").exists()]
    if fans:
        targets = read_json(ctx.input_path("targets", "targets.json"))
        _plot_fans(ctx.out / "volume_fans.png", fans, targets, problem.cfg)
    return ctx.out / "report.json"


def cmd_run(ctx: Context, args):
    """Every stage in order; synthetic inputs are generated unless paths are configured."""
    if not ctx.section("inputs"):
        log.info("wrote %s", cmd_synthetic(ctx, args))
    for fn in (cmd_fit_temporal, cmd_fit_spatial, cmd_prior_space):
        log.info("wrote %s", fn(ctx, args))
    _, waves = ctx.table
    problem = _problem(ctx)
    prior = _load_prior(ctx, problem)
    log.info("wrote %s", _write_design(ctx, problem, prior,
                                       problem.initial_state(prior, ctx.settings, ctx.seed), 1))
    for k in range(1, len(waves) + 1):
        wargs = argparse.Namespace(**{**vars(args), "wave": k})
        if not (_wave_dir(ctx, k) / "design.csv").exists():
            break
        log.info("wrote %s", cmd_simulate(ctx, wargs))
        log.info("wrote %s", cmd_wave(ctx, wargs))
    return cmd_report(ctx, args)


HANDLERS = {"synthetic": cmd_synthetic, "fit-temporal": cmd_fit_temporal,
            "fit-spatial": cmd_fit_spatial, "generate": cmd_generate,
            "prior-space": cmd_prior_space, "design": cmd_design, "simulate": cmd_simulate,
            "wave": cmd_wave, "report": cmd_report, "run": cmd_run}


# ------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    parser = _Parser(prog="bchm", description="Boundary-condition calibration by history matching")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__.splitlines()[0])
        if name in ("design", "simulate", "wave"):
            p.add_argument("--wave", type=int, required=True, help="1-based wave index")
        if name == "generate":
            p.add_argument("--coefficients", help="JSON list of boundary coefficients")
            p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    return parser


def _fail(exc, command, code):
    err = {"error": type(exc).__name__, "exit_code": code, "message": str(exc),
           "command": command}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        ctx = load_config(args.config, args.seed, args.out)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            path = HANDLERS[command](ctx, args)
        log.info("wrote %s", path)
        return 0
    except BchmError as exc:
        return _fail(exc, command, exc.exit_code)
    except SystemExit as exc:
        return exc.code or 0
    except Exception as exc:  # noqa: BLE001 - last-resort JSON error for unexpected failures
        return _fail(exc, command, INTERNAL_EXIT)


if __name__ == "__main__":
    sys.exit(main())
