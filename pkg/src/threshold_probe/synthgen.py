"""Synthetic data generation and a grid-based posterior oracle.

The generator forward-samples the exact hierarchy the model assumes, so
ground truth is known and posterior recovery can be scored. The grid
oracle evaluates the posterior density of up to three free parameters by
brute-force enumeration, using a deliberately separate, naive coding of
the density (plain Python loops, no shared likelihood code) so sampler
bugs cannot hide in a shared implementation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Case,
    Dataset,
    Hyperparams,
    JudgeParams,
    ModelParams,
    ParamSpace,
    PriorConfig,
    SkipModelParams,
    build_dataset,
)


@dataclass(frozen=True)
class DesignConfig:
    n_judges: int
    groups: tuple[str, ...]
    cases_per_judge: int
    d: int
    seed: int = 0
    feature_distribution: str = "standard_normal"
    group_mix: dict | None = None  # group -> probability; default uniform

    def __post_init__(self):
        if self.n_judges < 1 or self.cases_per_judge < 1 or self.d < 0:
            raise ValueError("n_judges, cases_per_judge >= 1 and d >= 0 required")
        if self.feature_distribution != "standard_normal":
            raise ValueError(f"unknown feature distribution {self.feature_distribution!r}")
        if self.group_mix is not None:
            if set(self.group_mix) != set(self.groups):
                raise ValueError("group_mix keys must match groups")
            total = sum(self.group_mix.values())
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"group_mix must sum to 1, got {total}")

    def judge_labels(self) -> list[str]:
        width = max(2, len(str(self.n_judges)))
        return [f"J{i:0{width}d}" for i in range(self.n_judges)]

    def mix_probs(self) -> np.ndarray:
        if self.group_mix is None:
            return np.full(len(self.groups), 1.0 / len(self.groups))
        return np.array([self.group_mix[g] for g in self.groups])


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, 2**32 + 1]))


def sample_ground_truth(design: DesignConfig, prior: PriorConfig = PriorConfig(),
                        seed: int | None = None,
                        hyper_override: Hyperparams | None = None) -> ModelParams:
    """Forward-sample hypers, judge parameters, and skip coefficients."""
    rng = _rng(design.seed if seed is None else seed)
    groups = tuple(design.groups)
    if hyper_override is None:
        hyper = Hyperparams(
            group_mean={g: float(rng.normal(0.0, prior.group_mean_scale))
                        for g in groups},
            group_sd={g: max(float(abs(rng.normal(0.0, prior.group_sd_scale))), 1e-8)
                      for g in groups},
            sharpness_mean=float(rng.normal(prior.sharpness_mean_loc,
                                            prior.sharpness_mean_scale)),
            sharpness_sd=max(float(abs(rng.normal(0.0, prior.sharpness_sd_scale))),
                             1e-8),
        )
    else:
        hyper = hyper_override
    judges = design.judge_labels()
    thresholds = {}
    log_sharpness = {}
    for j in judges:
        for g in groups:
            thresholds[(j, g)] = float(
                rng.normal(hyper.group_mean[g], max(hyper.group_sd[g], 1e-300)))
        log_sharpness[j] = float(
            rng.normal(hyper.sharpness_mean, max(hyper.sharpness_sd, 1e-300)))
    skip = SkipModelParams(
        intercept=float(rng.normal(0.0, prior.coef_scale)),
        coefficients=rng.normal(0.0, prior.coef_scale, design.d),
    )
    return ModelParams(skip=skip,
                       judges=JudgeParams(thresholds, log_sharpness),
                       hyper=hyper)


def sample_dataset(truth: ModelParams, design: DesignConfig,
                   seed: int | None = None) -> Dataset:
    """Simulate cases from the generative process under known parameters.

    Release rule: released = not bail_assigned (cash bail always detains).
    Skip outcomes are drawn only for released defendants.
    """
    rng = _rng((design.seed if seed is None else seed) + 1)
    groups = tuple(design.groups)
    mix = design.mix_probs()
    cases = []
    feature_names = tuple(f"x{k}" for k in range(design.d))
    i = 0
    for judge in design.judge_labels():
        kappa = truth.judges.sharpness(judge)
        for _ in range(design.cases_per_judge):
            group = groups[int(rng.choice(len(groups), p=mix))]
            x = rng.standard_normal(design.d)
            eta = truth.skip.intercept + float(truth.skip.coefficients @ x)
            p = 1.0 / (1.0 + math.exp(-eta)) if abs(eta) < 500 else float(eta > 0)
            p = min(max(p, 1e-12), 1.0 - 1e-12)
            tau = truth.judges.thresholds[(judge, group)]
            z = kappa * (math.log(p / (1.0 - p)) - tau)
            q = 1.0 / (1.0 + math.exp(-z)) if abs(z) < 500 else float(z > 0)
            bail = bool(rng.random() < q)
            released = not bail
            skipped = bool(rng.random() < p) if released else None
            cases.append(Case(
                case_id=f"c{i:06d}", judge=judge, group=group, features=x,
                bail_assigned=bail, released=released, skipped=skipped,
            ))
            i += 1
    return build_dataset(cases, feature_names,
                         judges=design.judge_labels(), groups=groups)


# ---------------------------------------------------------------------------
# grid oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Axis bounds and resolution per free parameter name."""

    axes: dict  # name -> (lo, hi, n_points)

    def grid(self, name):
        lo, hi, n = self.axes[name]
        return np.linspace(lo, hi, n)


@dataclass(frozen=True)
class GridPosterior:
    free_names: tuple[str, ...]
    grids: tuple[np.ndarray, ...]
    density: np.ndarray  # normalized joint density on the mesh

    def marginal(self, name: str):
        """1-D marginal density over one free axis (trapezoid-normalized)."""
        ax = self.free_names.index(name)
        other = [i for i in range(len(self.free_names)) if i != ax]
        dens = self.density
        for i in sorted(other, reverse=True):
            dens = np.trapezoid(dens, self.grids[i], axis=i)
        z = np.trapezoid(dens, self.grids[ax])
        return self.grids[ax], dens / z

    def bin_probabilities(self, name: str, n_bins: int = 50):
        """Probability mass per equal-width bin over the axis range.

        The piecewise-linear marginal is integrated exactly through its
        CDF, so bins narrower than the grid spacing still get their mass.
        """
        x, dens = self.marginal(name)
        dx = np.diff(x)
        cdf = np.concatenate(
            [[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dx)])
        edges = np.linspace(x[0], x[-1], n_bins + 1)
        mass = np.diff(np.interp(edges, x, cdf))
        return edges, mass / mass.sum()


def max_gradient_error(n_instances: int = 100, seed: int = 0,
                       h: float = 1e-5) -> float:
    """Analytic gradient vs central finite differences on random instances.

    Instances are small (<=5 judges, <=2 groups, d<=3, <=30 cases). Returns
    the worst relative error over all instances and coordinates.
    """
    from .model import CaseArrays, ParamSpace, log_posterior_flat, \
        log_posterior_gradient

    rng = _rng(seed + 17)
    prior = PriorConfig()
    worst = 0.0
    for k in range(n_instances):
        design = DesignConfig(
            n_judges=int(rng.integers(1, 6)),
            groups=("a", "b")[: int(rng.integers(1, 3))],
            cases_per_judge=int(rng.integers(2, 7)),
            d=int(rng.integers(0, 4)),
            seed=seed * 1000 + k,
        )
        truth = sample_ground_truth(design, prior)
        data = sample_dataset(truth, design)
        space = ParamSpace.from_dataset(data)
        arrays = CaseArrays.from_dataset(data)
        v = rng.normal(0.0, 0.7, space.dim)
        g = log_posterior_gradient(space, v, arrays, prior)
        fd = np.empty(space.dim)
        for i in range(space.dim):
            vp, vm = v.copy(), v.copy()
            vp[i] += h
            vm[i] -= h
            fd[i] = (log_posterior_flat(space, vp, arrays, prior)
                     - log_posterior_flat(space, vm, arrays, prior)) / (2 * h)
        denom = np.maximum(np.abs(fd), 1.0)
        worst = max(worst, float(np.max(np.abs(g - fd) / denom)))
    return worst


def _naive_logistic(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _naive_normal_lpdf(x, m, s):
    return -math.log(s) - 0.5 * math.log(2.0 * math.pi) - (x - m) ** 2 / (2.0 * s * s)


def _naive_log_posterior(space: ParamSpace, v, data: Dataset,
                         prior: PriorConfig) -> float:
    """Independent straight-line coding of the posterior log density."""
    d = space.d
    beta0 = v[0]
    beta = [v[1 + k] for k in range(d)]
    G = space.n_groups
    tau = {}
    log_kappa = {}
    for j, judge in enumerate(space.judges):
        for g, group in enumerate(space.groups):
            tau[(judge, group)] = v[space.sl_tau.start + j * G + g]
        log_kappa[judge] = v[space.sl_logkappa.start + j]
    mu = {g: v[space.sl_mu.start + i] for i, g in enumerate(space.groups)}
    log_sig = {g: v[space.sl_logsigma.start + i] for i, g in enumerate(space.groups)}
    mu_k = v[space.i_mu_kappa]
    log_sig_k = v[space.i_logsigma_kappa]

    lp = _naive_normal_lpdf(beta0, 0.0, prior.coef_scale)
    for b in beta:
        lp += _naive_normal_lpdf(b, 0.0, prior.coef_scale)
    for (judge, group), t in tau.items():
        lp += _naive_normal_lpdf(t, mu[group], math.exp(log_sig[group]))
    for judge, lk in log_kappa.items():
        lp += _naive_normal_lpdf(lk, mu_k, math.exp(log_sig_k))
    for g in space.groups:
        lp += _naive_normal_lpdf(mu[g], 0.0, prior.group_mean_scale)
        s = math.exp(log_sig[g])
        lp += math.log(2.0) + _naive_normal_lpdf(s, 0.0, prior.group_sd_scale) \
            + log_sig[g]
    lp += _naive_normal_lpdf(mu_k, prior.sharpness_mean_loc,
                             prior.sharpness_mean_scale)
    s_k = math.exp(log_sig_k)
    lp += math.log(2.0) + _naive_normal_lpdf(s_k, 0.0, prior.sharpness_sd_scale) \
        + log_sig_k

    eps = 1e-12
    for case in data.cases:
        eta = beta0
        for k in range(d):
            eta += beta[k] * case.features[k]
        p = _naive_logistic(eta)
        p = min(max(p, eps), 1.0 - eps)
        kappa = math.exp(log_kappa[case.judge])
        z = kappa * (math.log(p / (1.0 - p)) - tau[(case.judge, case.group)])
        q = _naive_logistic(z)
        q = min(max(q, eps), 1.0 - eps)
        lp += math.log(q) if case.bail_assigned else math.log(1.0 - q)
        if case.released:
            lp += math.log(p) if case.skipped else math.log(1.0 - p)
    return lp


def grid_oracle_posterior(data: Dataset, free_names, pinned: ModelParams,
                          grid_spec: GridSpec,
                          prior: PriorConfig = PriorConfig()) -> GridPosterior:
    """Enumerate the posterior of <=3 free parameters on a mesh.

    All other parameters are held at the pinned values. Warns when more
    than 1% of posterior mass sits in the outermost grid cells.
    """
    free_names = tuple(free_names)
    if not 1 <= len(free_names) <= 3:
        raise ValueError("grid oracle supports 1 to 3 free parameters")
    space = ParamSpace.from_dataset(data)
    names = space.names()
    base = space.flatten(pinned)
    idx = []
    for name in free_names:
        if name not in names:
            raise KeyError(f"unknown parameter {name!r}")
        idx.append(names.index(name))
    grids = tuple(grid_spec.grid(n) for n in free_names)

    shape = tuple(g.size for g in grids)
    log_dens = np.empty(shape)
    it = np.ndindex(shape)
    v = base.copy()
    for multi in it:
        for a, i in enumerate(idx):
            v[i] = grids[a][multi[a]]
        log_dens[multi] = _naive_log_posterior(space, v, data, prior)

    log_dens -= log_dens.max()
    dens = np.exp(log_dens)
    z = dens
    for a in range(len(grids) - 1, -1, -1):
        z = np.trapezoid(z, grids[a], axis=a)
    dens = dens / z

    # edge-mass check on each axis
    for a, name in enumerate(free_names):
        edges, mass = GridPosterior(free_names, grids, dens).bin_probabilities(
            name, n_bins=shape[a] - 1)
        edge_mass = mass[0] + mass[-1]
        if edge_mass > 0.01:
            warnings.warn(
                f"grid for {name!r} concentrates {edge_mass:.1%} of mass at the "
                "boundary; widen the bounds", stacklevel=2)
    return GridPosterior(free_names, grids, dens)
