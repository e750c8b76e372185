"""Command-line front end: simulate, synth, fit, sample, summarize.

Exit codes: 0 success, 1 configuration or data error, 2 numeric failure,
3 non-convergence (diagnostics are still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, RunConfig, load_config
from .engine import ProjectionError
from .graph import GraphError, write_graph_csv
from .inference.mcmc import SamplerOptions, Samples
from .inference.optimize import MapOptions, map_fit
from .inference.posterior import NonFinitePosterior, Posterior
from .inference.summary import summarize
from .observation import ObservationError, ObservationSet, read_observations, write_observations
from .outputs import (
    FormatError,
    parameters_from_json,
    read_json,
    read_samples,
    site_ids_from_names,
    write_json,
    write_samples,
    write_trajectories,
)
from .synthetic import ScenarioError, synthesize, truth_document

log = logging.getLogger("hivepi")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NOT_CONVERGED = 0, 1, 2, 3
LOCK_NAME = ".hivepi.lock"


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextmanager
def output_lock(outdir: Path):
    """Exclusive lock on an output directory for the life of one command."""
    outdir.mkdir(parents=True, exist_ok=True)
    lock = outdir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"output directory {outdir} is locked by another run ({lock})", EXIT_CONFIG)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield outdir
    finally:
        lock.unlink(missing_ok=True)


def _observations(cfg: RunConfig) -> ObservationSet:
    d = cfg.data
    return read_observations(d.surveys, d.anc, d.art_counts)


def _posterior(cfg: RunConfig, sites=None) -> Posterior:
    model = cfg.build_model()
    obs = _observations(cfg)
    sites = sites if sites is not None else (list(cfg.data.sites) if cfg.data.sites else None)
    return Posterior.build(model, obs, D=cfg.D, sites=sites)


def _require_seed(cfg: RunConfig, seed):
    seed = seed if seed is not None else cfg.inference.seed
    if seed is None:
        raise CommandError("--seed is required", EXIT_CONFIG)
    return int(seed)


def cmd_simulate(cfg: RunConfig, out: Path, seed=None) -> int:
    if cfg.data.parameters is None:
        raise CommandError("simulate needs data.parameters (a parameter JSON file)", EXIT_CONFIG)
    doc = read_json(cfg.data.parameters)
    names = list((doc.get("parameters") or {}).keys())
    model = cfg.build_model()
    post = Posterior.build(model, ObservationSet(), D=cfg.D, sites=site_ids_from_names(names))
    x = parameters_from_json(doc, post.layout)
    traj = post.project(x)
    write_trajectories(out / "trajectories.csv", traj, post.seek(x).pi)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out: Path, seed=None) -> int:
    spec = cfg.scenario_spec(seed)
    sc, traj, obs = synthesize(spec, cfg.nh(), cfg.model_options())
    write_graph_csv(sc.graph, out / "adjacency.csv", out / "population.csv")
    write_observations(obs, out)
    write_json(out / "truth.json", truth_document(sc, traj))
    write_json(out / "parameters.json", {"parameters": sc.truth.named()})
    post = sc.posterior(ObservationSet())
    write_trajectories(out / "truth_trajectories.csv", traj, post.seek(sc.truth.pack()).pi)
    tree = {
        "data": {"adjacency": "adjacency.csv", "population": "population.csv", "surveys": "surveys.csv",
                 "anc": "anc.csv", "art_counts": "art_counts.csv", "parameters": "parameters.json",
                 "sites": list(sc.sites)},
        "grid": {"t0": spec.t0, "t_end": spec.t_end, "h": spec.h},
        "kappa_spline": {"order": cfg.kappa_spline.order,
                         "knot_interval_years": cfg.kappa_spline.knot_interval_years},
        "alpha_spline": {"order": cfg.alpha_spline.order,
                         "knot_interval_years": cfg.alpha_spline.knot_interval_years,
                         "zero_before": spec.art_start},
        "mixing": {"w0": spec.w0},
        "seek": {"D": spec.D},
        "infection_entry": cfg.infection_entry,
        "omega_art": cfg.omega_art,
        "natural_history": sc.nh.to_dict(),
        "inference": {"seed": spec.seed},
    }
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        fh.write("# schema_version: 1\n")
        yaml.safe_dump(tree, fh, sort_keys=True)
    return EXIT_OK


def cmd_fit(cfg: RunConfig, out: Path, seed=None) -> int:
    seed = _require_seed(cfg, seed)
    post = _posterior(cfg)
    x0 = post.initial_point()
    try:
        post.value_and_grad(x0)
    except NonFinitePosterior as exc:
        raise CommandError(f"log posterior is not finite at the initial point: {exc}", EXIT_NUMERIC)
    res = map_fit(post.value_and_grad, x0,
                  MapOptions(gtol=cfg.inference.gtol, max_iter=cfg.inference.max_iter, seed=seed))
    names = post.layout.names()
    write_json(out / "map.json", {
        "converged": res.converged,
        "log_posterior": res.value,
        "grad_max_norm": res.grad_norm,
        "iterations": res.iterations,
        "evaluations": res.evaluations,
        "restarts": res.restarts,
        "positive_definite": res.positive_definite,
        "message": res.message,
        "diagnostics": res.diagnostics,
        "seed": seed,
        "names": names,
        "parameters": dict(zip(names, res.x.tolist())),
        "covariance": res.covariance.tolist(),
    })
    write_trajectories(out / "trajectories.csv", post.project(res.x), post.seek(res.x).pi)
    if not res.converged:
        log.error("MAP fit did not converge: %s", res.message)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_map(out: Path, post: Posterior):
    path = out / "map.json"
    if not path.exists():
        raise CommandError(f"{path} not found; run `fit` first", EXIT_CONFIG)
    doc = read_json(path)
    x = parameters_from_json(doc, post.layout)
    cov = np.asarray(doc.get("covariance"), dtype=float)
    if cov.shape != (x.size, x.size):
        raise CommandError(f"{path}: covariance shape does not match the parameters", EXIT_CONFIG)
    return x, cov


def cmd_sample(cfg: RunConfig, out: Path, seed=None) -> int:
    seed = _require_seed(cfg, seed)
    post = _posterior(cfg)
    x, cov = _load_map(out, post)
    inf = cfg.inference
    opts = SamplerOptions(chains=inf.chains, iters=inf.iters, warmup=inf.warmup, seed=seed,
                          steps=inf.steps, workers=inf.workers)
    try:
        s = post.sample(x, cov, opts)
    except ValueError as exc:
        raise CommandError(f"sampler failed: {exc}", EXIT_NUMERIC)
    write_samples(out / "posterior_samples.csv", s.draws, s.names)
    rhat = s.rhat() if s.draws.shape[1] >= 4 else np.full(len(s.names), np.nan)
    converged = not s.warnings
    write_json(out / "sampler.json", {
        "converged": converged,
        "seed": seed,
        "chains": opts.chains, "iters": opts.iters, "warmup": opts.warmup, "steps_per_iteration": s.steps,
        "acceptance": s.acceptance, "warmup_acceptance": s.warmup_acceptance, "scale": s.scale,
        "rhat_max": float(np.nanmax(rhat)) if np.isfinite(rhat).any() else None,
        "rhat_below_1_1": float(np.mean(rhat < 1.1)),
        "warnings": s.warnings,
    })
    if not converged:
        for w in s.warnings:
            log.error(w)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_summarize(cfg: RunConfig, out: Path, seed=None) -> int:
    path = out / "posterior_samples.csv"
    if not path.exists():
        raise CommandError(f"{path} not found; run `sample` first", EXIT_CONFIG)
    draws, names = read_samples(path)
    post = _posterior(cfg, sites=site_ids_from_names(names))
    if names != post.layout.names():
        raise CommandError(f"{path}: parameter columns do not match the model", EXIT_CONFIG)
    acc = warm = scale = np.full(draws.shape[0], np.nan)
    steps, warnings = 1, []
    if (out / "sampler.json").exists():
        meta = read_json(out / "sampler.json")
        acc = np.asarray(meta.get("acceptance", acc), dtype=float)
        warm = np.asarray(meta.get("warmup_acceptance", warm), dtype=float)
        scale = np.asarray(meta.get("scale", scale), dtype=float)
        steps = int(meta.get("steps_per_iteration", 1))
        warnings = list(meta.get("warnings", []))
    s = Samples(draws, acc, warm, scale, steps, names, warnings)
    summary = summarize(s, post, series_thin=cfg.inference.series_thin)
    write_json(out / "summary.json", summary.to_dict())
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "synth": cmd_synth, "fit": cmd_fit,
            "sample": cmd_sample, "summarize": cmd_summarize}


def build_parser() -> argparse.ArgumentParser:
    def common(suppress):
        c = argparse.ArgumentParser(add_help=False)
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        c.add_argument("--config", type=Path, help="YAML run configuration", **kw)
        c.add_argument("--out", type=Path, help="output directory (default: config `out` or .)", **kw)
        c.add_argument("--seed", type=int, help="unsigned 64-bit seed (required for fit and sample)", **kw)
        c.add_argument("-v", "--verbose", action="store_true", **kw)
        return c

    p = argparse.ArgumentParser(prog="hivepi", description=__doc__.splitlines()[0], parents=[common(False)])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"simulate": "project trajectories from a parameter file",
             "synth": "generate a synthetic scenario and data set",
             "fit": "find the posterior mode and Laplace covariance",
             "sample": "draw adaptive Metropolis chains from the MAP fit",
             "summarize": "posterior medians and 95%% intervals"}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, parents=[common(True)])
        if name == "sample":
            sp.add_argument("--chains", type=int)
            sp.add_argument("--iters", type=int)
            sp.add_argument("--warmup", type=int)
            sp.add_argument("--steps", type=int, help="Metropolis proposals per iteration")
            sp.add_argument("--workers", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {k: getattr(args, k, None) for k in ("chains", "iters", "warmup", "steps", "workers")}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if overrides:
            cfg = replace(cfg, inference=replace(cfg.inference, **overrides))
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        out = args.out or cfg.out or Path(".")
        with output_lock(Path(out)) as outdir:
            return COMMANDS[args.command](cfg, outdir, args.seed)
    except CommandError as exc:
        print(f"hivepi: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FormatError, GraphError, ObservationError, ScenarioError, FileNotFoundError) as exc:
        print(f"hivepi: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProjectionError, NonFinitePosterior, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"hivepi: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
