"""Convergence diagnostics for multi-chain draws shaped (chains, draws, ...)."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm, rankdata


def _split(draws):
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[1] // 2
    if n < 2:
        raise ValueError("need at least 4 draws per chain to split")
    return np.concatenate([draws[:, :n], draws[:, -n:]], axis=0)


def split_rhat(draws) -> np.ndarray:
    """Split-chain potential scale reduction for each trailing-axis scalar.

    Constant scalars get R-hat 1 when all chains agree and ``inf`` otherwise.
    """
    x = _split(draws)
    m, n = x.shape[:2]
    chain_mean = x.mean(axis=1)
    chain_var = x.var(axis=1, ddof=1)
    W = chain_var.mean(axis=0)
    B = n * chain_mean.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    r = np.where(W > 0, r, np.where(B > 0, np.inf, 1.0))
    return r


def _rank_normalize(x):
    flat = x.reshape(-1, *x.shape[2:])
    r = rankdata(flat, axis=0, method="average")
    z = norm.ppf((r - 0.375) / (flat.shape[0] + 0.25))
    return z.reshape(x.shape)


def _autocov(x):
    """Autocovariance along axis 1 via FFT, per chain and scalar."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def ess(draws) -> np.ndarray:
    """Effective sample size with Geyer's initial monotone sequence."""
    x = np.asarray(draws, dtype=float)
    m, n = x.shape[:2]
    flat = x.reshape(m, n, -1)
    out = np.empty(flat.shape[2])
    acov = _autocov(flat)
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean(axis=0)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus = var_plus + flat.mean(axis=1).var(axis=0, ddof=1)
    for k in range(flat.shape[2]):
        if var_plus[k] <= 0:
            out[k] = m * n
            continue
        rho = 1.0 - (mean_var[k] - acov[:, :, k].mean(axis=0)) / var_plus[k]
        rho[0] = 1.0
        # pair sums, truncated at the first negative, then made monotone
        t = 0
        pairs = []
        while t + 1 < n:
            p = rho[t] + rho[t + 1]
            if p < 0:
                break
            pairs.append(p)
            t += 2
        pairs = np.minimum.accumulate(np.asarray(pairs)) if pairs else np.array([1.0])
        tau = -1.0 + 2.0 * pairs.sum()
        out[k] = m * n / max(tau, 1.0 / np.log10(m * n))
    return out.reshape(x.shape[2:])


def bulk_ess(draws) -> np.ndarray:
    """ESS of the rank-normalised split chains."""
    return ess(_rank_normalize(_split(draws)))
