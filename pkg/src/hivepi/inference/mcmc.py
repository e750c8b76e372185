"""Adaptive random-walk Metropolis with independent, deterministically seeded chains."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import bulk_ess, split_rhat

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.234


@dataclass(frozen=True)
class SamplerOptions:
    """Settings for ``sample_posterior``.

    One iteration is ``steps`` Metropolis proposals; the state after the last
    one is retained. ``steps=None`` uses one sweep, ``dim`` proposals, per
    iteration: the mixing time of preconditioned random-walk proposals grows
    linearly in the dimension.
    """

    chains: int = 4
    iters: int = 2000
    warmup: int = 1000
    seed: int = 0
    steps: int | None = None
    adapt_every: int = 50
    start_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.iters < 1 or not 0 <= self.warmup < self.iters:
            raise ValueError("need chains >= 1 and 0 <= warmup < iters")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be positive")


@dataclass
class Samples:
    draws: np.ndarray  # (chains, kept, dim)
    acceptance: np.ndarray  # post-warmup acceptance per chain
    warmup_acceptance: np.ndarray
    scale: np.ndarray  # final proposal scale per chain
    steps: int
    names: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def rhat(self) -> np.ndarray:
        return split_rhat(self.draws)

    def ess(self) -> np.ndarray:
        return bulk_ess(self.draws)

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Counter-based stream owned by one chain."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain])))


def _chol(cov):
    d = cov.shape[0]
    jitter = 1e-10 * max(float(np.mean(np.diag(cov))), 1e-12)
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.maximum(w, 1e-12))


def _adaptation_windows(warmup: int) -> tuple[int, ...]:
    """Iterations at which the covariance estimate restarts; the last one ends adaptation."""
    return tuple(int(f * warmup) for f in (0.1, 0.25, 0.45, 0.8))


def _blend(m2, n, cov, weight):
    return (m2 + weight * cov) / (n - 1 + weight)


def run_chain(log_density, start, cov, opts: SamplerOptions, chain: int):
    """One chain. Returns (kept draws, post-warmup acceptance, warmup acceptance, scale)."""
    rng = chain_rng(opts.seed, chain)
    d = start.size
    steps = opts.steps or d
    cov = 0.5 * (cov + cov.T)
    L0 = _chol(cov)

    x = start.copy()
    if opts.start_scale > 0:
        for _ in range(100):
            cand = start + opts.start_scale * (L0 @ rng.standard_normal(d))
            if math.isfinite(log_density(cand)):
                x = cand
                break
    lp = log_density(x)
    if not math.isfinite(lp):
        raise ValueError("log density is not finite at the chain start")

    log_scale = math.log(2.38 / math.sqrt(d))
    L = L0
    # running moments of the warmup draws in the current window; each window
    # starts afresh so the drift away from the start point is forgotten, and
    # shrinks toward the covariance reached at the end of the previous one
    windows = _adaptation_windows(opts.warmup)
    n_seen, mean, m2 = 0, np.zeros(d), np.zeros((d, d))
    prior_weight = 2 * d

    kept = np.empty((opts.iters - opts.warmup, d))
    acc_w = acc_s = tot_w = tot_s = 0
    for it in range(opts.iters):
        warm = it < opts.warmup
        for _ in range(steps):
            prop = x + math.exp(log_scale) * (L @ rng.standard_normal(d))
            lp_prop = log_density(prop)
            log_u = math.log(rng.random())
            ok = math.isfinite(lp_prop) and log_u < lp_prop - lp
            if ok:
                x, lp = prop, lp_prop
            if warm:
                tot_w += 1
                acc_w += ok
                t = tot_w
                log_scale += (float(ok) - TARGET_ACCEPT) / math.sqrt(t + 100.0)
            else:
                tot_s += 1
                acc_s += ok
        if warm:
            if it in windows:
                if n_seen > 10:
                    cov = _blend(m2, n_seen, cov, prior_weight)
                n_seen, mean, m2 = 0, np.zeros(d), np.zeros((d, d))
            n_seen += 1
            delta = x - mean
            mean += delta / n_seen
            m2 += np.outer(delta, x - mean)
            # the last fifth of warmup only tunes the scale for the final covariance
            if (it + 1) % opts.adapt_every == 0 and n_seen > 10 and it < windows[-1]:
                L = _chol(_blend(m2, n_seen, cov, prior_weight))
        else:
            kept[it - opts.warmup] = x
    return (kept, acc_s / max(tot_s, 1), acc_w / max(tot_w, 1), math.exp(log_scale))


def _run_chain_args(args):
    return run_chain(*args)


def sample_posterior(log_density, start, cov, opts: SamplerOptions = SamplerOptions(),
                     names=None) -> Samples:
    """Draw ``opts.chains`` independent adaptive Metropolis chains.

    Each chain starts from a draw of N(start, start_scale^2 cov), adapts its
    proposal toward (2.38^2/d) times its empirical covariance during warmup
    (plus a Robbins-Monro scale targeting 0.234 acceptance) and then freezes
    it. Chain ``c`` uses its own Philox stream seeded by ``(seed, c)``, so
    results do not depend on ``workers``.
    """
    start = np.asarray(start, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (start.size, start.size):
        raise ValueError("covariance shape does not match the start point")
    if not np.allclose(cov, cov.T, rtol=1e-8, atol=1e-12 * max(np.abs(cov).max(), 1.0)):
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-8 * max(np.abs(cov).max(), 1.0):
        raise ValueError("covariance must be positive semi-definite")
    jobs = [(log_density, start, cov, opts, c) for c in range(opts.chains)]
    if opts.workers > 1 and opts.chains > 1:
        with ProcessPoolExecutor(max_workers=opts.workers) as pool:
            results = list(pool.map(_run_chain_args, jobs))
    else:
        results = [run_chain(*j) for j in jobs]
    draws = np.stack([r[0] for r in results])
    acc = np.array([r[1] for r in results])
    s = Samples(draws=draws, acceptance=acc, warmup_acceptance=np.array([r[2] for r in results]),
                scale=np.array([r[3] for r in results]),
                steps=opts.steps or start.size,
                names=list(names) if names is not None else [f"x[{i}]" for i in range(start.size)])
    for c, a in enumerate(acc):
        if a < 0.01:
            msg = f"chain {c}: acceptance {a:.4f} after warmup (all-rejection pathology)"
            s.warnings.append(msg)
            log.warning(msg)
    return s
