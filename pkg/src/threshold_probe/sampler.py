"""Adaptive Metropolis-within-Gibbs sampler for the bail-decision model.

Parameter blocks: the skip-model coefficients, one block per judge (its
thresholds plus log sharpness), and the hyperparameters. Proposal scales
adapt by Robbins-Monro during warmup and are frozen for the kept phase.
Each chain owns a counter-based Philox generator keyed by (seed, chain_id),
so results are bitwise reproducible regardless of scheduling.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .model import (
    CaseArrays,
    Dataset,
    ParamSpace,
    PriorConfig,
    decision_loglik_cells,
    log_posterior_gradient,
    log_prior_flat,
    sigmoid,
    skip_logits,
    skip_outcome_loglik,
)

_ADAPT_WINDOW = 25


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sample_iters: int = 2000
    thin: int = 1
    seed: int = 0
    target_accept_univariate: float = 0.44
    target_accept_block: float = 0.234
    init_strategy: str = "prior_draw"  # prior_draw | zero | jittered_map
    skip_block_mode: str = "rwm"  # rwm | mala
    pinned: dict = field(default_factory=dict)  # parameter name -> fixed value

    def __post_init__(self):
        if min(self.chains, self.warmup_iters, self.sample_iters, self.thin) < 1:
            raise ValueError("chains/iters/thin must all be >= 1")
        for t in (self.target_accept_univariate, self.target_accept_block):
            if not 0.0 < t < 1.0:
                raise ValueError("acceptance targets must lie in (0,1)")
        if self.init_strategy not in ("prior_draw", "zero", "jittered_map"):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")
        if self.skip_block_mode not in ("rwm", "mala"):
            raise ValueError(f"unknown skip_block_mode {self.skip_block_mode!r}")


@dataclass
class Block:
    name: str
    idx: np.ndarray  # coordinate indices into the flattened vector
    kind: str  # skip | judge | hypers | shift | interweave | pivot | stretch
    judge: int | None = None  # judge array index for judge blocks
    group: int | None = None  # group array index for interweave-tau blocks
    ndim: int | None = None  # proposal dimension when it differs from idx size
    part: str | None = None  # "mu" or "sigma" for interweave moves

    @property
    def proposal_dim(self) -> int:
        return self.ndim if self.ndim is not None else self.idx.size


@dataclass
class ChainState:
    position: np.ndarray
    log_density: float
    proposal_scales: np.ndarray  # per block
    accept_counts: np.ndarray  # per block
    step_counts: np.ndarray  # per block
    rng: np.random.Generator
    # cached likelihood pieces, kept consistent with position
    eta: np.ndarray
    eta_c: np.ndarray  # eta capped to the logit range
    dec_ll: np.ndarray  # per (judge, group) cell
    skip_ll: float
    # per-block Cholesky factors of the warmup covariance (None = isotropic)
    proposal_chol: list = None


def make_blocks(space: ParamSpace, pinned_idx: set[int]) -> list[Block]:
    """Update blocks: skip model, one per judge, small hyper blocks, and
    reparametrization moves (translation + non-centered interweaving) that
    cut the posterior couplings between levels of the hierarchy."""
    blocks = []
    skip_idx = np.array(
        [i for i in range(space.sl_skip.start, space.sl_skip.stop)
         if i not in pinned_idx], dtype=np.intp)
    if skip_idx.size:
        blocks.append(Block("skip", skip_idx, "skip"))
    for j, judge in enumerate(space.judges):
        idx = [space.sl_tau.start + j * space.n_groups + g
               for g in range(space.n_groups)]
        idx.append(space.sl_logkappa.start + j)
        idx = np.array([i for i in idx if i not in pinned_idx], dtype=np.intp)
        if idx.size:
            blocks.append(Block(f"judge:{judge}", idx, "judge", judge=j))
    for g, group in enumerate(space.groups):
        idx = np.array([i for i in (space.sl_mu.start + g,
                                    space.sl_logsigma.start + g)
                        if i not in pinned_idx], dtype=np.intp)
        if idx.size:
            blocks.append(Block(f"hypers:{group}", idx, "hypers", group=g))
    idx = np.array([i for i in (space.i_mu_kappa, space.i_logsigma_kappa)
                    if i not in pinned_idx], dtype=np.intp)
    if idx.size:
        blocks.append(Block("hypers:kappa", idx, "hypers"))

    tau_all = list(range(space.sl_tau.start, space.sl_tau.stop))
    mu_all = list(range(space.sl_mu.start, space.sl_mu.stop))
    if space.n_judges and not pinned_idx.intersection([0, *tau_all, *mu_all]):
        blocks.append(Block("shift", np.empty(0, dtype=np.intp), "shift",
                            ndim=1))
    for g, group in enumerate(space.groups):
        tau_g = [space.sl_tau.start + j * space.n_groups + g
                 for j in range(space.n_judges)]
        touched = [space.sl_mu.start + g, space.sl_logsigma.start + g, *tau_g]
        if space.n_judges and not pinned_idx.intersection(touched):
            for part in ("mu", "sigma"):
                blocks.append(Block(f"interweave:{group}:{part}",
                                    np.empty(0, dtype=np.intp), "interweave",
                                    group=g, ndim=1, part=part))
    kap_all = list(range(space.sl_logkappa.start, space.sl_logkappa.stop))
    touched = [space.i_mu_kappa, space.i_logsigma_kappa, *kap_all]
    if space.n_judges and not pinned_idx.intersection(touched):
        for part in ("mu", "sigma"):
            blocks.append(Block(f"interweave:kappa:{part}",
                                np.empty(0, dtype=np.intp), "interweave",
                                group=None, ndim=1, part=part))
    sigma_all = list(range(space.sl_logsigma.start, space.sl_logsigma.stop))
    pivot_touched = [*tau_all, *mu_all, *sigma_all, *kap_all,
                     space.i_mu_kappa]
    if space.n_judges and not pinned_idx.intersection(pivot_touched):
        blocks.append(Block("pivot", np.empty(0, dtype=np.intp), "pivot",
                            ndim=1))
    stretch_touched = [*range(space.sl_skip.start, space.sl_skip.stop),
                       *pivot_touched]
    if space.n_judges and skip_idx.size \
            and not pinned_idx.intersection(stretch_touched):
        blocks.append(Block("stretch", np.empty(0, dtype=np.intp), "stretch",
                            ndim=1))
    if not blocks:
        raise SamplerError("all parameters pinned: nothing to sample")
    return blocks


def _pinned_indices(space: ParamSpace, pinned: dict) -> dict[int, float]:
    names = space.names()
    lookup = {n: i for i, n in enumerate(names)}
    out = {}
    for name, value in pinned.items():
        if name not in lookup:
            raise KeyError(f"unknown parameter {name!r}; available: {names}")
        out[lookup[name]] = float(value)
    return out


def chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, chain_id]))


def _refresh_caches(space, v, arrays):
    eta = skip_logits(space, v, arrays.X)
    eta_c = np.clip(eta, -_LOGIT_CAP_, _LOGIT_CAP_)
    dec = decision_loglik_cells(space, v, arrays, eta_c, clipped=True)
    sk = skip_outcome_loglik(arrays, eta)
    return eta, eta_c, dec, sk


def sample_prior_vector(space: ParamSpace, prior: PriorConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Forward draw from the hierarchical prior on the unconstrained scale."""
    v = np.empty(space.dim)
    v[space.sl_skip] = rng.normal(0.0, prior.coef_scale, 1 + space.d)
    mu = rng.normal(0.0, prior.group_mean_scale, space.n_groups)
    sigma = np.abs(rng.normal(0.0, prior.group_sd_scale, space.n_groups))
    mu_k = rng.normal(prior.sharpness_mean_loc, prior.sharpness_mean_scale)
    sigma_k = abs(rng.normal(0.0, prior.sharpness_sd_scale))
    v[space.sl_mu] = mu
    v[space.sl_logsigma] = np.log(np.maximum(sigma, 1e-8))
    v[space.i_mu_kappa] = mu_k
    v[space.i_logsigma_kappa] = math.log(max(sigma_k, 1e-8))
    tau = rng.normal(mu[None, :], sigma[None, :], (space.n_judges, space.n_groups))
    v[space.sl_tau] = tau.ravel()
    v[space.sl_logkappa] = rng.normal(mu_k, sigma_k, space.n_judges)
    return v


def init_chain(data: Dataset, config: SamplerConfig, chain_id: int,
               prior: PriorConfig = PriorConfig(),
               space: ParamSpace | None = None,
               arrays: CaseArrays | None = None) -> ChainState:
    """Deterministic function of (seed, chain_id)."""
    space = space or ParamSpace.from_dataset(data)
    arrays = arrays or CaseArrays.from_dataset(data)
    pinned = _pinned_indices(space, config.pinned)
    blocks = make_blocks(space, set(pinned))
    rng = chain_rng(config.seed, chain_id)

    for _ in range(10):
        if config.init_strategy == "zero":
            v = np.zeros(space.dim)
        elif config.init_strategy == "prior_draw":
            v = sample_prior_vector(space, prior, rng)
        else:  # jittered_map
            v = _ascend_to_map(space, np.zeros(space.dim), arrays, prior, pinned)
            v += rng.normal(0.0, 0.1, space.dim)
        for i, val in pinned.items():
            v[i] = val
        eta, eta_c, dec, sk = _refresh_caches(space, v, arrays)
        ld = log_prior_flat(space, v, prior) + float(np.sum(dec)) + sk
        if math.isfinite(ld):
            scales = np.full(len(blocks), 0.5)
            return ChainState(
                position=v, log_density=ld, proposal_scales=scales,
                accept_counts=np.zeros(len(blocks)),
                step_counts=np.zeros(len(blocks)),
                rng=rng, eta=eta, eta_c=eta_c, dec_ll=dec, skip_ll=sk,
                proposal_chol=[None] * len(blocks),
            )
        if config.init_strategy == "zero":
            break  # deterministic start cannot be retried
    raise SamplerError(f"chain {chain_id}: no finite initial log-density after retries")


def _ascend_to_map(space, v, arrays, prior, pinned, max_steps=200):
    """Crude gradient ascent with backtracking toward a posterior mode."""
    v = v.copy()
    free = np.array([i for i in range(space.dim) if i not in pinned], dtype=np.intp)
    step = 1e-3

    def f(x):
        _, _, dec, sk = _refresh_caches(space, x, arrays)
        return log_prior_flat(space, x, prior) + float(np.sum(dec)) + sk

    cur = f(v)
    for _ in range(max_steps):
        g = log_posterior_gradient(space, v, arrays, prior)
        gn = float(np.linalg.norm(g[free]))
        if gn < 1e-6:
            break
        cand = v.copy()
        cand[free] = v[free] + step * g[free]
        new = f(cand)
        if math.isfinite(new) and new > cur:
            v, cur = cand, new
            step *= 1.5
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return v


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _scalar_normal_lpdf(x, m, s):
    return -math.log(s) - _HALF_LOG_2PI - (x - m) ** 2 / (2.0 * s * s)


def _half_normal_log_term(u, scale):
    """HalfNormal(scale) on exp(u), including the log-transform Jacobian."""
    sig = math.exp(u)
    return math.log(2.0) + _scalar_normal_lpdf(sig, 0.0, scale) + u


def _prior_terms(space, v, block, prior: PriorConfig) -> float:
    """Prior log-density restricted to the terms a block move can change."""
    G = space.n_groups
    if block.kind == "skip":
        w = v[space.sl_skip]
        return float(-w.size * (math.log(prior.coef_scale) + _HALF_LOG_2PI)
                     - np.sum(w * w) / (2.0 * prior.coef_scale ** 2))
    if block.kind == "judge":
        j = block.judge
        lp = 0.0
        for g in range(G):
            t = v[space.sl_tau.start + j * G + g]
            m = v[space.sl_mu.start + g]
            s_ = math.exp(v[space.sl_logsigma.start + g])
            lp += _scalar_normal_lpdf(t, m, s_)
        lp += _scalar_normal_lpdf(
            v[space.sl_logkappa.start + j], v[space.i_mu_kappa],
            math.exp(v[space.i_logsigma_kappa]))
        return lp
    if block.kind in ("hypers", "interweave") and block.group is not None:
        g = block.group
        m = v[space.sl_mu.start + g]
        u = v[space.sl_logsigma.start + g]
        s_ = math.exp(u)
        taus = v[space.sl_tau.start + g:space.sl_tau.stop:G]
        lp = float(-taus.size * (math.log(s_) + _HALF_LOG_2PI)
                   - np.sum((taus - m) ** 2) / (2.0 * s_ * s_))
        lp += _scalar_normal_lpdf(m, 0.0, prior.group_mean_scale)
        lp += _half_normal_log_term(u, prior.group_sd_scale)
        return lp
    if block.kind in ("hypers", "interweave"):
        # kappa-level hypers
        m = v[space.i_mu_kappa]
        u = v[space.i_logsigma_kappa]
        s_ = math.exp(u)
        lks = v[space.sl_logkappa]
        lp = float(-lks.size * (math.log(s_) + _HALF_LOG_2PI)
                   - np.sum((lks - m) ** 2) / (2.0 * s_ * s_))
        lp += _scalar_normal_lpdf(m, prior.sharpness_mean_loc,
                                  prior.sharpness_mean_scale)
        lp += _half_normal_log_term(u, prior.sharpness_sd_scale)
        return lp
    if block.kind == "shift":
        # tau residuals are invariant under the translation but cheap to include
        lp = _scalar_normal_lpdf(v[0], 0.0, prior.coef_scale)
        mus = v[space.sl_mu]
        lp += float(-mus.size * (math.log(prior.group_mean_scale) + _HALF_LOG_2PI)
                    - np.sum(mus * mus) / (2.0 * prior.group_mean_scale ** 2))
        return lp
    if block.kind == "stretch":
        # the dilation touches every level of the model; take the full prior
        return log_prior_flat(space, v, prior)
    if block.kind == "pivot":
        # every prior term except the skip coefficients and sigma_kappa's own
        lp = 0.0
        for g in range(G):
            m = v[space.sl_mu.start + g]
            u = v[space.sl_logsigma.start + g]
            s_ = math.exp(u)
            taus = v[space.sl_tau.start + g:space.sl_tau.stop:G]
            lp += float(-taus.size * (math.log(s_) + _HALF_LOG_2PI)
                        - np.sum((taus - m) ** 2) / (2.0 * s_ * s_))
            lp += _scalar_normal_lpdf(m, 0.0, prior.group_mean_scale)
            lp += _half_normal_log_term(u, prior.group_sd_scale)
        m = v[space.i_mu_kappa]
        s_ = math.exp(v[space.i_logsigma_kappa])
        lks = v[space.sl_logkappa]
        lp += float(-lks.size * (math.log(s_) + _HALF_LOG_2PI)
                    - np.sum((lks - m) ** 2) / (2.0 * s_ * s_))
        lp += _scalar_normal_lpdf(m, prior.sharpness_mean_loc,
                                  prior.sharpness_mean_scale)
        return lp
    raise AssertionError(f"unhandled block kind {block.kind}")


def _block_delta(space, blocks, block_i, state: ChainState, prop: np.ndarray,
                 arrays: CaseArrays, prior: PriorConfig):
    """Log-density change and updated caches for a proposed block move."""
    block = blocks[block_i]
    d_prior = _prior_terms(space, prop, block, prior) - _prior_terms(
        space, state.position, block, prior)
    if block.kind == "hypers":
        return d_prior, state.eta, state.eta_c, state.dec_ll, state.skip_ll
    if block.kind == "judge":
        j = block.judge
        idx = arrays.judge_case_idx[j]
        new_row = decision_loglik_cells(space, prop, arrays, state.eta_c,
                                        idx, clipped=True)[j]
        dec = state.dec_ll.copy()
        delta = d_prior + float(new_row.sum()) - float(dec[j].sum())
        dec[j] = new_row
        return delta, state.eta, state.eta_c, dec, state.skip_ll
    if block.kind == "interweave" and block.group is not None:
        # only the moved group's thresholds changed; splice in that column
        g = block.group
        idx = arrays.group_case_idx[g]
        col = decision_loglik_cells(space, prop, arrays, state.eta_c,
                                    idx, clipped=True)[:, g]
        dec = state.dec_ll.copy()
        delta = d_prior + float(col.sum()) - float(dec[:, g].sum())
        dec[:, g] = col
        return delta, state.eta, state.eta_c, dec, state.skip_ll
    if block.kind in ("interweave", "pivot"):
        # thresholds or sharpness moved, skip logits did not
        dec = decision_loglik_cells(space, prop, arrays, state.eta_c,
                                    clipped=True)
        delta = d_prior + float(dec.sum()) - float(state.dec_ll.sum())
        return delta, state.eta, state.eta_c, dec, state.skip_ll
    if block.kind == "shift":
        eta = state.eta + (prop[0] - state.position[0])
        eta_c = np.clip(eta, -_LOGIT_CAP_, _LOGIT_CAP_)
        dec = decision_loglik_cells(space, prop, arrays, eta_c, clipped=True)
        sk = skip_outcome_loglik(arrays, eta)
        delta = d_prior + float(dec.sum()) - float(state.dec_ll.sum()) \
            + sk - state.skip_ll
        return delta, eta, eta_c, dec, sk
    # skip block: everything depending on eta changes
    eta, eta_c, dec, sk = _refresh_caches(space, prop, arrays)
    delta = d_prior + float(dec.sum()) - float(state.dec_ll.sum()) \
        + sk - state.skip_ll
    return delta, eta, eta_c, dec, sk


_LOGIT_CAP_ = math.log((1.0 - 1e-12) / 1e-12)


def metropolis_block_step(state: ChainState, block_i: int, blocks, space,
                          arrays: CaseArrays, prior: PriorConfig,
                          mala: bool = False) -> bool:
    """One Metropolis update of a single block. Mutates state in place."""
    block = blocks[block_i]
    scale = state.proposal_scales[block_i]
    noise = state.rng.standard_normal(block.proposal_dim)
    prop = state.position.copy()
    log_jacobian = 0.0

    if block.kind == "shift":
        # translate beta0, every threshold, and every group mean together;
        # the decision likelihood is invariant along this direction
        delta_s = scale * noise[0]
        prop[0] += delta_s
        prop[space.sl_tau] += delta_s
        prop[space.sl_mu] += delta_s
    elif block.kind == "interweave":
        # non-centered move: update one hyper while holding the
        # standardized offsets fixed, transporting the child parameters
        if block.group is not None:
            g = block.group
            i_mu = space.sl_mu.start + g
            i_u = space.sl_logsigma.start + g
            child = np.arange(space.sl_tau.start + g,
                              space.sl_tau.stop, space.n_groups)
        else:
            i_mu = space.i_mu_kappa
            i_u = space.i_logsigma_kappa
            child = np.arange(space.sl_logkappa.start, space.sl_logkappa.stop)
        if block.part == "mu":
            d_mu = scale * noise[0]
            prop[i_mu] += d_mu
            prop[child] = state.position[child] + d_mu
        else:
            d_u = scale * noise[0]
            prop[i_u] += d_u
            prop[child] = prop[i_mu] + math.exp(d_u) * (
                state.position[child] - state.position[i_mu])
            log_jacobian = child.size * d_u
    elif block.kind == "pivot":
        # trade overall sharpness against threshold spread: shrink every
        # kappa while dilating thresholds about the mean skip logit, the
        # direction along which the decision likelihood is nearly flat
        d = scale * noise[0]
        c = float(np.mean(state.eta_c)) if state.eta_c.size else 0.0
        prop[space.sl_logkappa] -= d
        prop[space.i_mu_kappa] -= d
        grow = math.exp(d)
        prop[space.sl_tau] = c - grow * (c - prop[space.sl_tau])
        prop[space.sl_mu] = c - grow * (c - prop[space.sl_mu])
        prop[space.sl_logsigma] += d
        log_jacobian = (space.n_judges * space.n_groups + space.n_groups) * d
    elif block.kind == "stretch":
        # scale the spread of the case logits about their mean against the
        # overall sharpness: eta -> c + e^d (eta - c) with kappa -> e^-d kappa
        # and thresholds dilated to match leaves the decision likelihood
        # invariant, cutting the beta-kappa coupling
        d = scale * noise[0]
        c = float(np.mean(state.eta)) if state.eta.size else 0.0
        grow = math.exp(d)
        prop[0] = c + grow * (prop[0] - c)
        prop[1:space.sl_skip.stop] *= grow
        prop[space.sl_logkappa] -= d
        prop[space.i_mu_kappa] -= d
        prop[space.sl_tau] = c + grow * (prop[space.sl_tau] - c)
        prop[space.sl_mu] = c + grow * (prop[space.sl_mu] - c)
        prop[space.sl_logsigma] += d
        # c is invariant under the map, so beta0's diagonal term is 1
        log_jacobian = (space.d + space.n_judges * space.n_groups
                        + space.n_groups) * d
    elif mala and block.kind == "skip":
        # preconditioned Langevin proposal: the warmup covariance (C = L L')
        # shapes both the drift and the noise
        g_cur = log_posterior_gradient(space, state.position, arrays, prior)
        chol = state.proposal_chol[block_i]
        if chol is None:
            drift_cur = 0.5 * scale ** 2 * g_cur[block.idx]
            prop[block.idx] += drift_cur + scale * noise
        else:
            drift_cur = 0.5 * scale ** 2 * (chol @ (chol.T @ g_cur[block.idx]))
            prop[block.idx] += drift_cur + scale * (chol @ noise)
    else:
        chol = state.proposal_chol[block_i]
        if chol is None:
            prop[block.idx] += scale * noise
        else:
            prop[block.idx] += scale * (chol @ noise)

    delta, eta, eta_c, dec, sk = _block_delta(
        space, blocks, block_i, state, prop, arrays, prior)
    delta += log_jacobian

    if mala and block.kind == "skip":
        g_prop = log_posterior_gradient(space, prop, arrays, prior)
        if chol is None:
            drift_prop = 0.5 * scale ** 2 * g_prop[block.idx]
        else:
            drift_prop = 0.5 * scale ** 2 * (chol @ (chol.T @ g_prop[block.idx]))
        fwd = prop[block.idx] - state.position[block.idx] - drift_cur
        bwd = state.position[block.idx] - prop[block.idx] - drift_prop
        if chol is not None:
            # Mahalanobis norms under the preconditioner
            fwd = np.linalg.solve(chol, fwd)
            bwd = np.linalg.solve(chol, bwd)
        if scale > 0:
            delta += (np.sum(fwd ** 2) - np.sum(bwd ** 2)) / (2.0 * scale ** 2)

    state.step_counts[block_i] += 1
    log_u = math.log(state.rng.random()) if scale > 0 else -math.inf
    accepted = math.isfinite(delta) and (delta >= 0.0 or log_u < delta)
    if scale == 0.0:
        accepted = True  # degenerate proposal equals the current point
    if accepted:
        state.position = prop
        state.log_density += delta
        state.eta, state.eta_c = eta, eta_c
        state.dec_ll, state.skip_ll = dec, sk
        state.accept_counts[block_i] += 1
    return accepted


def adapt_scales(state: ChainState, window_rates: np.ndarray, iteration: int,
                 targets: np.ndarray) -> None:
    """Robbins-Monro proposal-scale update; call only during warmup."""
    gamma = iteration ** -0.6
    state.proposal_scales *= np.exp(gamma * (window_rates - targets))


def _skip_block_hessian(space, v, arrays: CaseArrays, prior: PriorConfig,
                        idx: np.ndarray) -> np.ndarray:
    """Negative Hessian of the log posterior restricted to the skip block.

    Exact for both logistic terms (outcome and decision likelihoods) plus
    the Gaussian prior; the decision term makes the skip coefficients far
    better determined than their marginal prior suggests, and strongly
    correlated, so the curvature is what shapes a usable proposal.
    """
    eta = np.clip(skip_logits(space, v, arrays.X), -_LOGIT_CAP_, _LOGIT_CAP_)
    tau = v[space.sl_tau].reshape(space.n_judges, space.n_groups)
    kap = np.exp(v[space.sl_logkappa])[arrays.judge_idx]
    q = sigmoid(kap * (eta - tau[arrays.judge_idx, arrays.group_idx]))
    w = kap ** 2 * q * (1.0 - q)
    p = sigmoid(eta)
    w = w + np.where(arrays.released, p * (1.0 - p), 0.0)
    design = np.concatenate([np.ones((eta.size, 1)), arrays.X], axis=1)[:, idx]
    return (design.T @ (design * w[:, None])
            + np.eye(idx.size) / prior.coef_scale ** 2)


def _update_proposal_shapes(state: ChainState, blocks, history, space,
                            arrays: CaseArrays, prior: PriorConfig) -> None:
    """Refit per-block proposal shapes during warmup.

    The skip block is preconditioned with the analytic Hessian at the
    current position (trajectory covariance is unreliable before that
    block mixes); other coordinate blocks get a trajectory-covariance
    Cholesky; the reparametrization moves stay scalar.
    """
    for bi, block in enumerate(blocks):
        if block.kind == "skip" and block.idx.size >= 2:
            hess = _skip_block_hessian(space, state.position, arrays, prior,
                                       block.idx)
            try:
                cov = np.linalg.inv(hess)
                sd = np.sqrt(np.diag(cov))
                chol = np.linalg.cholesky(cov / np.mean(sd ** 2))
            except np.linalg.LinAlgError:
                continue
            state.proposal_chol[bi] = chol
    if len(history) < 4 * _ADAPT_WINDOW:
        return
    traj = np.array(history[len(history) // 2:])
    for bi, block in enumerate(blocks):
        if block.kind in ("shift", "interweave", "pivot", "skip") \
                or block.idx.size < 2:
            continue
        cov = np.cov(traj[:, block.idx], rowvar=False)
        cov += 1e-10 * np.eye(block.idx.size)
        sd = np.sqrt(np.diag(cov))
        if np.any(sd < 1e-8):
            continue
        # normalize so the adapted scalar keeps its meaning across refits
        try:
            chol = np.linalg.cholesky(cov / np.mean(sd ** 2))
        except np.linalg.LinAlgError:
            continue
        state.proposal_chol[bi] = chol


def run_chain(data: Dataset, config: SamplerConfig, chain_id: int,
              prior: PriorConfig = PriorConfig(),
              space: ParamSpace | None = None,
              arrays: CaseArrays | None = None) -> np.ndarray:
    """Run one chain; returns kept draws (kept_iters, D)."""
    space = space or ParamSpace.from_dataset(data)
    arrays = arrays or CaseArrays.from_dataset(data)
    pinned = _pinned_indices(space, config.pinned)
    blocks = make_blocks(space, set(pinned))
    state = init_chain(data, config, chain_id, prior, space, arrays)
    mala = config.skip_block_mode == "mala"
    targets = np.array([
        0.574 if mala and b.kind == "skip"
        else config.target_accept_univariate if b.proposal_dim == 1
        else config.target_accept_block
        for b in blocks
    ])

    reps = {"skip": 2, "judge": 3, "hypers": 8, "shift": 2, "interweave": 8,
            "pivot": 3, "stretch": 2}
    schedule = [bi for bi, b in enumerate(blocks)
                for _ in range(reps[b.kind])]

    window_acc = np.zeros(len(blocks))
    window_n = np.zeros(len(blocks))
    n_windows = 0
    any_accept = False
    history = []
    for t in range(config.warmup_iters):
        for bi in schedule:
            acc = metropolis_block_step(state, bi, blocks, space, arrays,
                                        prior, mala)
            window_acc[bi] += acc
            window_n[bi] += 1
            any_accept = any_accept or acc
        history.append(state.position.copy())
        if (t + 1) % _ADAPT_WINDOW == 0 or t + 1 == config.warmup_iters:
            n_windows += 1
            adapt_scales(state, window_acc / np.maximum(window_n, 1),
                         n_windows, targets)
            window_acc[:] = 0.0
            window_n[:] = 0.0
            _update_proposal_shapes(state, blocks, history, space, arrays,
                                    prior)
    if config.warmup_iters > 0 and not any_accept:
        raise SamplerError(
            f"chain {chain_id}: no proposal accepted during warmup; "
            "the target density looks pathological")

    kept = []
    for t in range(config.sample_iters):
        for bi in schedule:
            metropolis_block_step(state, bi, blocks, space, arrays, prior, mala)
        if (t + 1) % config.thin == 0:
            kept.append(state.position.copy())
    return np.array(kept) if kept else np.empty((0, space.dim))


@dataclass(frozen=True)
class PosteriorSamples:
    draws: np.ndarray  # (chains, kept_iters, D)
    names: tuple[str, ...]
    config: SamplerConfig
    dataset_fingerprint: str

    def column(self, name: str) -> np.ndarray:
        """Per-chain draws for one parameter, shape (chains, kept_iters)."""
        try:
            i = self.names.index(name)
        except ValueError:
            raise KeyError(
                f"unknown parameter {name!r}; available: {list(self.names)}"
            ) from None
        return self.draws[:, :, i]

    def pooled(self, name: str) -> np.ndarray:
        return self.column(name).ravel()


def run_chains(data: Dataset, config: SamplerConfig,
               prior: PriorConfig = PriorConfig()) -> PosteriorSamples:
    """Run all chains (parallelism capped by THRESHOLD_PROBE_THREADS)."""
    space = ParamSpace.from_dataset(data)
    arrays = CaseArrays.from_dataset(data)
    fingerprint = data.fingerprint()

    def one(cid):
        try:
            return run_chain(data, config, cid, prior, space, arrays)
        except Exception as exc:
            raise SamplerError(f"chain {cid} failed: {exc}") from exc

    max_workers = int(os.environ.get("THRESHOLD_PROBE_THREADS", "1") or "1")
    max_workers = max(1, min(max_workers, config.chains))
    if max_workers == 1:
        per_chain = [one(cid) for cid in range(config.chains)]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_chain = list(pool.map(one, range(config.chains)))
    return PosteriorSamples(
        draws=np.stack(per_chain),
        names=tuple(space.names()),
        config=config,
        dataset_fingerprint=fingerprint,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_draws(samples: PosteriorSamples, out_dir, diagnostics: dict | None = None):
    """Write draws.csv (chain column + one column per parameter) and meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "draws.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", *samples.names])
        for c in range(samples.draws.shape[0]):
            for row in samples.draws[c]:
                writer.writerow([c, *(f"{x:.17g}" for x in row)])
    meta = {
        "config": asdict(samples.config),
        "dataset_fingerprint": samples.dataset_fingerprint,
        "names": list(samples.names),
        "n_chains": int(samples.draws.shape[0]),
        "n_kept": int(samples.draws.shape[1]),
        "diagnostics": diagnostics or {},
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "draws.csv", out / "meta.json"


def load_draws(in_dir) -> PosteriorSamples:
    src = Path(in_dir)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    names = meta["names"]
    raw = np.loadtxt(src / "draws.csv", delimiter=",", skiprows=1, ndmin=2)
    chains = meta["n_chains"]
    kept = meta["n_kept"]
    draws = np.empty((chains, kept, len(names)))
    for c in range(chains):
        block = raw[raw[:, 0] == c][:, 1:]
        draws[c] = block
    cfg_kwargs = dict(meta["config"])
    config = SamplerConfig(**cfg_kwargs)
    return PosteriorSamples(
        draws=draws, names=tuple(names), config=config,
        dataset_fingerprint=meta["dataset_fingerprint"],
    )
