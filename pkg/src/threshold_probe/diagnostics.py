"""Multi-chain convergence diagnostics: split R-hat and effective sample size."""

from __future__ import annotations

import warnings

import numpy as np

# Chains whose pooled variance falls below this are treated as constant.
_CONST_VAR = 1e-12


def _as_chain_matrix(draws) -> np.ndarray:
    arr = np.asarray(draws, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"expected (chains, draws) matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 chains")
    if arr.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    return arr


def split_r_hat(draws) -> float:
    """Split Gelman-Rubin statistic over a (chains, draws) matrix.

    Each chain is halved before computing the between/within variance ratio,
    so a single slowly-drifting chain is caught. Constant input returns 1.0.
    """
    arr = _as_chain_matrix(draws)
    half = arr.shape[1] // 2
    split = np.vstack([arr[:, :half], arr[:, arr.shape[1] - half:]])
    if float(np.var(split)) < _CONST_VAR:
        return 1.0
    m, n = split.shape
    chain_means = split.mean(axis=1)
    w = float(np.mean(np.var(split, axis=1, ddof=1)))
    b = n * float(np.var(chain_means, ddof=1))
    var_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(var_hat / w))


def effective_sample_size(draws) -> float:
    """Autocorrelation-based ESS across chains.

    Uses per-chain FFT autocovariances combined with the multi-chain variance
    estimate, truncated by Geyer's initial monotone positive sequence.
    Capped at the total draw count; constant chains return 0 with a warning.
    """
    arr = _as_chain_matrix(draws)
    m, n = arr.shape
    total = m * n
    if float(np.var(arr)) < _CONST_VAR:
        warnings.warn("constant chain: effective sample size is 0", stacklevel=2)
        return 0.0

    # biased autocovariance per chain via FFT
    centered = arr - arr.mean(axis=1, keepdims=True)
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, n=nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=1)[:, :n].real / n

    chain_var = np.var(arr, axis=1, ddof=1)
    w = float(np.mean(chain_var))
    b_over_n = float(np.var(arr.mean(axis=1), ddof=1))
    var_hat = (n - 1) / n * w + b_over_n

    rho = 1.0 - (w - acov.mean(axis=0)) / var_hat
    rho[0] = 1.0

    # Geyer initial monotone positive sequence on pair sums
    n_pairs = n // 2
    tau = 1.0
    prev = np.inf
    acc = 0.0
    for k in range(n_pairs):
        pair = rho[2 * k] + (rho[2 * k + 1] if 2 * k + 1 < n else 0.0)
        if pair < 0.0:
            break
        pair = min(pair, prev)
        prev = pair
        acc += pair
    tau = max(2.0 * acc - 1.0, 1.0 / total)
    return float(min(total / tau, total))
