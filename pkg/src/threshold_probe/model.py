"""Generative model for judicial cash-bail decisions.

A case-level logistic model predicts the probability a released defendant
skips a court date. Each judge applies a soft threshold in logit space,
separately per defendant group: bail is assigned with probability
sigma(kappa * (logit(p) - tau)). The thresholds tau get a hierarchical
normal prior per group, which is what lets cross-group threshold gaps be
estimated per judge.

All posterior computation happens on an unconstrained flattened vector;
positive scale parameters live on the log scale there, with the Jacobian
of the transform included in the prior.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

# Probabilities are clamped this far from {0, 1} before any log.
PROB_EPS = 1e-12
# logit(PROB_EPS); logits beyond this are saturated.
_LOGIT_CAP = math.log((1.0 - PROB_EPS) / PROB_EPS)


class DimensionError(ValueError):
    """Feature vector length does not match the coefficient vector."""


class StructuralError(KeyError):
    """A (judge, group) pair is missing from the parameter maps."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Case:
    case_id: str
    judge: str
    group: str
    features: np.ndarray
    bail_assigned: bool
    released: bool
    skipped: bool | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "features", np.asarray(self.features, dtype=float)
        )
        if self.released and self.skipped is None:
            raise ValueError(
                f"case {self.case_id}: released cases must carry a skipped outcome"
            )
        if not self.released and self.skipped is not None:
            raise ValueError(
                f"case {self.case_id}: skipped outcome present for a detained case"
            )


@dataclass(frozen=True)
class SkipModelParams:
    intercept: float
    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "coefficients", np.asarray(self.coefficients, dtype=float)
        )
        if not math.isfinite(self.intercept) or not np.all(
            np.isfinite(self.coefficients)
        ):
            raise ValueError("skip-model parameters must be finite")


@dataclass(frozen=True)
class JudgeParams:
    thresholds: dict[tuple[str, str], float]
    log_sharpness: dict[str, float]

    def sharpness(self, judge: str) -> float:
        return math.exp(self.log_sharpness[judge])


@dataclass(frozen=True)
class Hyperparams:
    group_mean: dict[str, float]
    group_sd: dict[str, float]
    sharpness_mean: float
    sharpness_sd: float

    def __post_init__(self):
        if any(s <= 0 for s in self.group_sd.values()) or self.sharpness_sd <= 0:
            raise ValueError("scale hyperparameters must be strictly positive")


@dataclass(frozen=True)
class ModelParams:
    skip: SkipModelParams
    judges: JudgeParams
    hyper: Hyperparams


@dataclass(frozen=True)
class Dataset:
    cases: tuple[Case, ...]
    judge_index: dict[str, int]
    group_index: dict[str, int]
    feature_names: tuple[str, ...]
    standardization: tuple[tuple[float, float], ...] | None = None

    @property
    def d(self) -> int:
        return len(self.feature_names)

    def fingerprint(self) -> str:
        """Content hash; stable across process runs."""
        h = hashlib.sha256()
        h.update(",".join(self.feature_names).encode())
        for c in self.cases:
            h.update(
                f"{c.case_id}|{c.judge}|{c.group}|{int(c.bail_assigned)}|"
                f"{int(c.released)}|{'' if c.skipped is None else int(c.skipped)}|".encode()
            )
            h.update(np.ascontiguousarray(c.features, dtype=float).tobytes())
        return h.hexdigest()


def build_dataset(cases, feature_names, standardization=None,
                  judges=None, groups=None) -> Dataset:
    """Assemble a Dataset with contiguous sorted judge/group indices.

    Extra judge/group labels may be supplied for datasets that mention
    parameters without observing any case for them (prior-only fits).
    """
    cases = tuple(cases)
    judges = sorted({c.judge for c in cases} | set(judges or ()))
    groups = sorted({c.group for c in cases} | set(groups or ()))
    d = len(feature_names)
    for c in cases:
        if c.features.shape != (d,):
            raise DimensionError(
                f"case {c.case_id}: expected {d} features, got {c.features.shape[0]}"
            )
    return Dataset(
        cases=cases,
        judge_index={j: i for i, j in enumerate(judges)},
        group_index={g: i for i, g in enumerate(groups)},
        feature_names=tuple(feature_names),
        standardization=standardization,
    )


@dataclass(frozen=True)
class PriorConfig:
    """Scales of the weakly-informative default priors (standardized inputs)."""

    coef_scale: float = 1.0
    group_mean_scale: float = 2.0
    group_sd_scale: float = 1.0
    sharpness_mean_loc: float = 0.0
    sharpness_mean_scale: float = 1.0
    sharpness_sd_scale: float = 0.5


# ---------------------------------------------------------------------------
# scalar operations
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def skip_probability(skip: SkipModelParams, features) -> float:
    """Probability the defendant skips, given standardized case features."""
    features = np.asarray(features, dtype=float)
    if features.shape != skip.coefficients.shape:
        raise DimensionError(
            f"expected {skip.coefficients.shape[0]} features, got {features.shape[0]}"
        )
    p = float(sigmoid(skip.intercept + skip.coefficients @ features))
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


def decision_probability(tau: float, kappa: float, p: float) -> float:
    """Probability the judge assigns cash bail to a case with skip risk p."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly in (0,1), got {p}")
    return float(sigmoid(kappa * (math.log(p / (1.0 - p)) - tau)))


def threshold_to_cost_ratio(tau: float) -> float:
    """Indifference skip probability: the cost ratio C_bail / C_skip.

    A judge with threshold tau assigns bail when the skip risk exceeds
    sigma(tau), so sigma(tau) is the skip probability at which the expected
    cost of assigning bail equals the expected cost of a skip.
    """
    return float(sigmoid(tau))


def case_log_likelihood(params: ModelParams, case: Case) -> float:
    """Log-likelihood of one case: decision term plus, if released, outcome term."""
    key = (case.judge, case.group)
    if key not in params.judges.thresholds:
        raise StructuralError(f"no threshold for judge/group {key}")
    if case.judge not in params.judges.log_sharpness:
        raise StructuralError(f"no sharpness for judge {case.judge}")
    p = skip_probability(params.skip, case.features)
    q = decision_probability(
        params.judges.thresholds[key], params.judges.sharpness(case.judge), p
    )
    q = min(max(q, PROB_EPS), 1.0 - PROB_EPS)
    ll = math.log(q) if case.bail_assigned else math.log(1.0 - q)
    if case.released:
        ll += math.log(p) if case.skipped else math.log(1.0 - p)
    return ll


# ---------------------------------------------------------------------------
# flattening
# ---------------------------------------------------------------------------


class ParamSpace:
    """Fixed flattening of ModelParams to an unconstrained real vector.

    Layout (in order):
      beta0, beta[f] per feature,
      tau[judge,group] (judges then groups, both sorted),
      log_kappa[judge],
      mu[group], log_sigma[group],
      mu_kappa, log_sigma_kappa.
    Positive quantities (group_sd, sharpness_sd) are stored on the log scale.
    """

    def __init__(self, judges, groups, feature_names):
        self.judges = tuple(judges)
        self.groups = tuple(groups)
        self.feature_names = tuple(feature_names)
        d, J, G = len(self.feature_names), len(self.judges), len(self.groups)
        self.d, self.n_judges, self.n_groups = d, J, G
        self.sl_skip = slice(0, 1 + d)
        self.sl_tau = slice(1 + d, 1 + d + J * G)
        self.sl_logkappa = slice(self.sl_tau.stop, self.sl_tau.stop + J)
        self.sl_mu = slice(self.sl_logkappa.stop, self.sl_logkappa.stop + G)
        self.sl_logsigma = slice(self.sl_mu.stop, self.sl_mu.stop + G)
        self.i_mu_kappa = self.sl_logsigma.stop
        self.i_logsigma_kappa = self.i_mu_kappa + 1
        self.dim = self.i_logsigma_kappa + 1

    @classmethod
    def from_dataset(cls, data: Dataset) -> "ParamSpace":
        return cls(
            sorted(data.judge_index, key=data.judge_index.get),
            sorted(data.group_index, key=data.group_index.get),
            data.feature_names,
        )

    def tau_index(self, judge: str, group: str) -> int:
        j = self.judges.index(judge)
        g = self.groups.index(group)
        return self.sl_tau.start + j * self.n_groups + g

    def logkappa_index(self, judge: str) -> int:
        return self.sl_logkappa.start + self.judges.index(judge)

    def names(self) -> list[str]:
        names = ["beta0"] + [f"beta[{f}]" for f in self.feature_names]
        names += [
            f"tau[judge={j},group={g}]" for j in self.judges for g in self.groups
        ]
        names += [f"log_kappa[judge={j}]" for j in self.judges]
        names += [f"mu[group={g}]" for g in self.groups]
        names += [f"log_sigma[group={g}]" for g in self.groups]
        names += ["mu_kappa", "log_sigma_kappa"]
        return names

    def flatten(self, params: ModelParams) -> np.ndarray:
        v = np.empty(self.dim)
        v[0] = params.skip.intercept
        v[1 : 1 + self.d] = params.skip.coefficients
        for j, judge in enumerate(self.judges):
            for g, group in enumerate(self.groups):
                v[self.sl_tau.start + j * self.n_groups + g] = (
                    params.judges.thresholds[(judge, group)]
                )
            v[self.sl_logkappa.start + j] = params.judges.log_sharpness[judge]
        for g, group in enumerate(self.groups):
            v[self.sl_mu.start + g] = params.hyper.group_mean[group]
            v[self.sl_logsigma.start + g] = math.log(params.hyper.group_sd[group])
        v[self.i_mu_kappa] = params.hyper.sharpness_mean
        v[self.i_logsigma_kappa] = math.log(params.hyper.sharpness_sd)
        return v

    def unflatten(self, v: np.ndarray) -> ModelParams:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DimensionError(f"expected vector of length {self.dim}, got {v.shape}")
        G = self.n_groups
        thresholds = {}
        log_sharpness = {}
        for j, judge in enumerate(self.judges):
            for g, group in enumerate(self.groups):
                thresholds[(judge, group)] = float(v[self.sl_tau.start + j * G + g])
            log_sharpness[judge] = float(v[self.sl_logkappa.start + j])
        return ModelParams(
            skip=SkipModelParams(
                intercept=float(v[0]), coefficients=v[1 : 1 + self.d].copy()
            ),
            judges=JudgeParams(thresholds=thresholds, log_sharpness=log_sharpness),
            hyper=Hyperparams(
                group_mean={g: float(v[self.sl_mu.start + i])
                            for i, g in enumerate(self.groups)},
                group_sd={g: math.exp(v[self.sl_logsigma.start + i])
                          for i, g in enumerate(self.groups)},
                sharpness_mean=float(v[self.i_mu_kappa]),
                sharpness_sd=math.exp(v[self.i_logsigma_kappa]),
            ),
        )


# ---------------------------------------------------------------------------
# vectorized case arrays
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseArrays:
    """Columnar view of a Dataset for vectorized likelihood work."""

    X: np.ndarray          # (n, d)
    judge_idx: np.ndarray  # (n,) int
    group_idx: np.ndarray  # (n,) int
    bail: np.ndarray       # (n,) float 0/1
    released: np.ndarray   # (n,) bool
    skipped: np.ndarray    # (n,) float 0/1, only meaningful where released
    n_judges: int
    n_groups: int
    judge_case_idx: tuple[np.ndarray, ...] = field(repr=False, default=())
    group_case_idx: tuple[np.ndarray, ...] = field(repr=False, default=())

    @classmethod
    def from_dataset(cls, data: Dataset) -> "CaseArrays":
        n = len(data.cases)
        X = np.zeros((n, data.d))
        judge_idx = np.zeros(n, dtype=np.intp)
        group_idx = np.zeros(n, dtype=np.intp)
        bail = np.zeros(n)
        released = np.zeros(n, dtype=bool)
        skipped = np.zeros(n)
        for i, c in enumerate(data.cases):
            X[i] = c.features
            judge_idx[i] = data.judge_index[c.judge]
            group_idx[i] = data.group_index[c.group]
            bail[i] = float(c.bail_assigned)
            released[i] = c.released
            skipped[i] = float(bool(c.skipped))
        J = len(data.judge_index)
        G = len(data.group_index)
        per_judge = tuple(np.flatnonzero(judge_idx == j) for j in range(J))
        per_group = tuple(np.flatnonzero(group_idx == g) for g in range(G))
        return cls(X, judge_idx, group_idx, bail, released, skipped,
                   J, G, per_judge, per_group)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def skip_logits(space: ParamSpace, v: np.ndarray, X: np.ndarray) -> np.ndarray:
    return v[0] + X @ v[1 : 1 + space.d]


def decision_loglik_per_judge(space, v, arrays: CaseArrays, eta) -> np.ndarray:
    """Per-judge sum of log Bernoulli(bail; decision_probability)."""
    eta_c = np.clip(eta, -_LOGIT_CAP, _LOGIT_CAP)
    tau = v[space.sl_tau].reshape(space.n_judges, space.n_groups)
    kappa = np.exp(v[space.sl_logkappa])
    z = kappa[arrays.judge_idx] * (eta_c - tau[arrays.judge_idx, arrays.group_idx])
    # log Bernoulli(bail; sigmoid(z)) = log sigmoid(sign * z), sign = +/-1
    ll = _log_sigmoid((2.0 * arrays.bail - 1.0) * z)
    return np.bincount(arrays.judge_idx, weights=ll, minlength=arrays.n_judges)


def decision_loglik_cells(space, v, arrays: CaseArrays, eta,
                          case_idx=None, clipped=False) -> np.ndarray:
    """Decision log-likelihood summed per (judge, group) cell.

    With ``case_idx`` the sum runs over that case subset only; cells with no
    selected case come back zero, so callers can splice columns into a cache.
    Pass ``clipped=True`` when ``eta`` is already capped to the logit range.
    """
    J, G = arrays.n_judges, arrays.n_groups
    tau = v[space.sl_tau].reshape(J, G)
    kappa = np.exp(v[space.sl_logkappa])
    if case_idx is None:
        ji, gi, eta_i, bail = (arrays.judge_idx, arrays.group_idx,
                               eta, arrays.bail)
    else:
        ji, gi = arrays.judge_idx[case_idx], arrays.group_idx[case_idx]
        eta_i, bail = eta[case_idx], arrays.bail[case_idx]
    eta_c = eta_i if clipped else np.clip(eta_i, -_LOGIT_CAP, _LOGIT_CAP)
    z = kappa[ji] * (eta_c - tau[ji, gi])
    ll = _log_sigmoid((2.0 * bail - 1.0) * z)
    flat = np.bincount(ji * G + gi, weights=ll, minlength=J * G)
    return flat.reshape(J, G)


def skip_outcome_loglik(arrays: CaseArrays, eta) -> float:
    """Sum over released cases of log Bernoulli(skipped; p)."""
    if not arrays.released.any():
        return 0.0
    e = eta[arrays.released]
    s = arrays.skipped[arrays.released]
    ll = np.maximum(_log_sigmoid((2.0 * s - 1.0) * e), math.log(PROB_EPS))
    return float(np.sum(ll))


def _normal_logpdf(x, mean, sd):
    return -np.log(sd) - 0.5 * math.log(2 * math.pi) - 0.5 * ((x - mean) / sd) ** 2


def log_prior_flat(space: ParamSpace, v: np.ndarray,
                   prior: PriorConfig = PriorConfig()) -> float:
    """Log prior density on the unconstrained flattened vector.

    HalfNormal priors on the group and sharpness scales are expressed through
    the log transform, so the log-Jacobian (+log sigma) is included here.
    """
    lp = float(np.sum(_normal_logpdf(v[space.sl_skip], 0.0, prior.coef_scale)))
    mu = v[space.sl_mu]
    log_sigma = v[space.sl_logsigma]
    sigma = np.exp(log_sigma)
    tau = v[space.sl_tau].reshape(space.n_judges, space.n_groups)
    lp += float(np.sum(_normal_logpdf(tau, mu[None, :], sigma[None, :])))
    mu_k = v[space.i_mu_kappa]
    sigma_k = math.exp(v[space.i_logsigma_kappa])
    lp += float(np.sum(_normal_logpdf(v[space.sl_logkappa], mu_k, sigma_k)))
    # hyperpriors
    lp += float(np.sum(_normal_logpdf(mu, 0.0, prior.group_mean_scale)))
    # HalfNormal(s) on sigma = exp(u), plus Jacobian u
    lp += float(np.sum(
        math.log(2.0) + _normal_logpdf(sigma, 0.0, prior.group_sd_scale) + log_sigma
    ))
    lp += float(_normal_logpdf(mu_k, prior.sharpness_mean_loc,
                               prior.sharpness_mean_scale))
    lp += (math.log(2.0)
           + float(_normal_logpdf(sigma_k, 0.0, prior.sharpness_sd_scale))
           + float(v[space.i_logsigma_kappa]))
    return lp


def log_prior(params: ModelParams, prior: PriorConfig = PriorConfig(),
              space: ParamSpace | None = None) -> float:
    """Log prior of structured params, evaluated on the unconstrained scale."""
    if space is None:
        space = ParamSpace(
            sorted(params.judges.log_sharpness),
            sorted({g for _, g in params.judges.thresholds}),
            [f"x{i}" for i in range(len(params.skip.coefficients))],
        )
    return log_prior_flat(space, space.flatten(params), prior)


def log_likelihood_flat(space, v, arrays: CaseArrays) -> float:
    eta = skip_logits(space, v, arrays.X)
    return float(np.sum(decision_loglik_per_judge(space, v, arrays, eta))) + \
        skip_outcome_loglik(arrays, eta)


def log_posterior_flat(space, v, arrays: CaseArrays,
                       prior: PriorConfig = PriorConfig()) -> float:
    return log_prior_flat(space, v, prior) + log_likelihood_flat(space, v, arrays)


def log_posterior(params: ModelParams, data: Dataset,
                  prior: PriorConfig = PriorConfig()) -> float:
    space = ParamSpace.from_dataset(data)
    arrays = CaseArrays.from_dataset(data)
    return log_posterior_flat(space, space.flatten(params), arrays, prior)


def log_posterior_gradient(space, v, arrays: CaseArrays,
                           prior: PriorConfig = PriorConfig()) -> np.ndarray:
    """Analytic gradient of log_posterior_flat w.r.t. the unconstrained vector."""
    v = np.asarray(v, dtype=float)
    d, J, G = space.d, space.n_judges, space.n_groups
    grad = np.zeros(space.dim)

    eta = skip_logits(space, v, arrays.X)
    unclipped = np.abs(eta) < _LOGIT_CAP
    eta_c = np.clip(eta, -_LOGIT_CAP, _LOGIT_CAP)
    tau = v[space.sl_tau].reshape(J, G)
    kappa = np.exp(v[space.sl_logkappa])
    kap_i = kappa[arrays.judge_idx]
    z = kap_i * (eta_c - tau[arrays.judge_idx, arrays.group_idx])
    r = arrays.bail - sigmoid(z)  # d loglik / dz per case

    cell = arrays.judge_idx * G + arrays.group_idx
    grad[space.sl_tau] = np.bincount(cell, weights=-kap_i * r, minlength=J * G)
    grad[space.sl_logkappa] = np.bincount(
        arrays.judge_idx, weights=r * z, minlength=J
    )

    g_eta = np.where(unclipped, r * kap_i, 0.0)
    if arrays.released.any():
        p = sigmoid(eta)
        # clamped log terms have zero derivative
        ok = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
        g_eta += np.where(arrays.released & ok, arrays.skipped - p, 0.0)
    grad[0] = float(np.sum(g_eta))
    grad[1 : 1 + d] = arrays.X.T @ g_eta

    # prior terms
    mu = v[space.sl_mu]
    log_sigma = v[space.sl_logsigma]
    sigma = np.exp(log_sigma)
    resid = (tau - mu[None, :]) / sigma[None, :] ** 2
    grad[space.sl_tau] += (-resid).ravel()
    grad[space.sl_mu] = resid.sum(axis=0) - mu / prior.group_mean_scale ** 2
    grad[space.sl_logsigma] = (
        -J + (((tau - mu[None, :]) / sigma[None, :]) ** 2).sum(axis=0)
        - sigma ** 2 / prior.group_sd_scale ** 2 + 1.0
    )
    grad[space.sl_skip] += -v[space.sl_skip] / prior.coef_scale ** 2

    mu_k = v[space.i_mu_kappa]
    lk = v[space.sl_logkappa]
    with np.errstate(over="ignore"):
        sigma_k = np.exp(np.float64(v[space.i_logsigma_kappa]))
        sk2 = sigma_k * sigma_k  # may overflow to inf; caught below
        grad[space.sl_logkappa] += -(lk - mu_k) / sk2
        grad[space.i_mu_kappa] = (
            float(np.sum(lk - mu_k)) / sk2
            - (mu_k - prior.sharpness_mean_loc)
            / prior.sharpness_mean_scale ** 2
        )
        grad[space.i_logsigma_kappa] = (
            -J + float(np.sum(((lk - mu_k) / sigma_k) ** 2))
            - sk2 / prior.sharpness_sd_scale ** 2 + 1.0
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise FloatingPointError(
            f"non-finite gradient at coordinate {bad} ({space.names()[bad]})"
        )
    return grad
