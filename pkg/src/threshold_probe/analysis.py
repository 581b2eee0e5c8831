"""Posterior summaries, cross-group disparity reports, decision curves, PPC."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import effective_sample_size, split_r_hat
from .model import CaseArrays, Dataset, sigmoid
from .sampler import PosteriorSamples


class AnalysisError(ValueError):
    pass


def _tau_name(judge: str, group: str) -> str:
    return f"tau[judge={judge},group={group}]"


def _judges_in(samples: PosteriorSamples):
    judges = []
    for name in samples.names:
        if name.startswith("log_kappa[judge="):
            judges.append(name[len("log_kappa[judge="):-1])
    return sorted(judges)


def _groups_in(samples: PosteriorSamples):
    groups = set()
    for name in samples.names:
        if name.startswith("mu[group="):
            groups.add(name[len("mu[group="):-1])
    return sorted(groups)


@dataclass(frozen=True)
class ParameterSummary:
    name: str
    mean: float
    sd: float
    q05: float
    q50: float
    q95: float
    r_hat: float
    ess: float


def posterior_summary(samples: PosteriorSamples, pattern: str = "*"):
    """Per-parameter summary for every name matching the glob pattern.

    Quantiles use type-7 linear interpolation on pooled post-warmup draws.
    """
    matched = [n for n in samples.names if fnmatch.fnmatch(n, pattern)]
    if not matched:
        raise AnalysisError(
            f"pattern {pattern!r} matches no parameter; available: "
            f"{list(samples.names)}")
    out = []
    for name in matched:
        chains = samples.column(name)
        pooled = chains.ravel()
        q05, q50, q95 = np.quantile(pooled, [0.05, 0.5, 0.95])  # type-7 default
        if chains.shape[0] >= 2 and chains.shape[1] >= 4:
            rh = split_r_hat(chains)
            import warnings as _w
            with _w.catch_warnings():
                _w.simplefilter("ignore")
                ess = effective_sample_size(chains)
        else:
            rh, ess = float("nan"), float("nan")
        out.append(ParameterSummary(
            name=name, mean=float(pooled.mean()), sd=float(pooled.std()),
            q05=float(q05), q50=float(q50), q95=float(q95),
            r_hat=rh, ess=ess,
        ))
    return out


@dataclass(frozen=True)
class JudgeDisparity:
    judge: str
    prob_lower_threshold: float  # P(tau_A < tau_B | data), ties count as not-lower
    posterior_mean_gap: float  # mean of tau_A - tau_B, logit units
    ci90_gap: tuple[float, float]


@dataclass(frozen=True)
class DisparityReport:
    per_judge: dict  # judge -> JudgeDisparity
    min_over_judges: float
    groups_compared: tuple[str, str]
    n_draws_used: int
    n_above_half: int
    n_above_09: int


def judge_disparity(samples: PosteriorSamples, judge: str,
                    group_a: str, group_b: str) -> JudgeDisparity:
    """Posterior ordering probability and gap for one judge's thresholds."""
    try:
        a = samples.pooled(_tau_name(judge, group_a))
        b = samples.pooled(_tau_name(judge, group_b))
    except KeyError as exc:
        raise AnalysisError(str(exc)) from exc
    gap = a - b
    lo, hi = np.quantile(gap, [0.05, 0.95])
    return JudgeDisparity(
        judge=judge,
        prob_lower_threshold=float(np.mean(a < b)),
        posterior_mean_gap=float(gap.mean()),
        ci90_gap=(float(lo), float(hi)),
    )


def uniform_disparity(samples: PosteriorSamples, group_a: str,
                      group_b: str) -> DisparityReport:
    """Disparity for every judge; min over judges captures the uniformity claim."""
    judges = _judges_in(samples)
    if not judges:
        raise AnalysisError("no judges present in posterior samples")
    groups = _groups_in(samples)
    for g in (group_a, group_b):
        if g not in groups:
            raise AnalysisError(
                f"unknown group {g!r}; available groups: {groups}")
    per_judge = {j: judge_disparity(samples, j, group_a, group_b)
                 for j in judges}
    probs = [d.prob_lower_threshold for d in per_judge.values()]
    return DisparityReport(
        per_judge=per_judge,
        min_over_judges=float(min(probs)),
        groups_compared=(group_a, group_b),
        n_draws_used=int(samples.draws.shape[0] * samples.draws.shape[1]),
        n_above_half=sum(p > 0.5 for p in probs),
        n_above_09=sum(p > 0.9 for p in probs),
    )


def decision_curve(samples: PosteriorSamples, judge: str, group: str,
                   p_grid):
    """Posterior mean and 90% band of the bail probability at fixed skip risk.

    Returns a list of (p, mean, lo, hi) rows, one per grid point.
    """
    p_grid = np.asarray(p_grid, dtype=float)
    if np.any(p_grid <= 0.0) or np.any(p_grid >= 1.0):
        raise AnalysisError("p_grid values must lie strictly in (0,1)")
    tau = samples.pooled(_tau_name(judge, group))
    kappa = np.exp(samples.pooled(f"log_kappa[judge={judge}]"))
    logit_p = np.log(p_grid / (1.0 - p_grid))
    rows = []
    for p, lp in zip(p_grid, logit_p):
        vals = sigmoid(kappa * (lp - tau))
        lo, hi = np.quantile(vals, [0.05, 0.95])
        rows.append((float(p), float(vals.mean()), float(lo), float(hi)))
    return rows


@dataclass(frozen=True)
class CellCheck:
    judge: str
    group: str
    n_cases: int
    observed_rate: float
    predictive_mean: float
    predictive_ci90: tuple[float, float]
    tail_probability: float


@dataclass(frozen=True)
class PpcReport:
    cells: list
    skipped_cells: list  # (judge, group) pairs with no cases
    skip_rate_check: CellCheck | None  # pooled skip rate among released


def posterior_predictive_check(samples: PosteriorSamples, data: Dataset,
                               seed: int = 0, n_rep: int = 200) -> PpcReport:
    """Simulate decisions from posterior draws and compare cell bail rates."""
    if samples.dataset_fingerprint != data.fingerprint():
        raise AnalysisError(
            "posterior samples were fit to a different dataset "
            "(fingerprint mismatch)")
    arrays = CaseArrays.from_dataset(data)
    from .model import ParamSpace, skip_logits, PROB_EPS

    space = ParamSpace.from_dataset(data)
    pooled = samples.draws.reshape(-1, samples.draws.shape[2])
    rng = np.random.Generator(np.random.Philox(key=[seed, 2**32 + 2]))
    rep_idx = rng.choice(pooled.shape[0], size=min(n_rep, pooled.shape[0]),
                         replace=False)

    J, G = space.n_judges, space.n_groups
    cell = arrays.judge_idx * G + arrays.group_idx
    n_cell = np.bincount(cell, minlength=J * G)
    obs_cell = np.bincount(cell, weights=arrays.bail, minlength=J * G)

    rep_rates = np.empty((rep_idx.size, J * G))
    rep_skip = np.empty(rep_idx.size)
    n_released = int(arrays.released.sum())
    obs_skip = (float(arrays.skipped[arrays.released].mean())
                if n_released else float("nan"))
    cap = math.log((1.0 - PROB_EPS) / PROB_EPS)
    for r, di in enumerate(rep_idx):
        v = pooled[di]
        eta = np.clip(skip_logits(space, v, arrays.X), -cap, cap)
        tau = v[space.sl_tau].reshape(J, G)
        kappa = np.exp(v[space.sl_logkappa])
        q = sigmoid(kappa[arrays.judge_idx]
                    * (eta - tau[arrays.judge_idx, arrays.group_idx]))
        sim_bail = rng.random(arrays.n) < q
        rep_rates[r] = np.bincount(cell, weights=sim_bail.astype(float),
                                   minlength=J * G)
        if n_released:
            p = sigmoid(eta[arrays.released])
            sim_skip = rng.random(n_released) < p
            rep_skip[r] = sim_skip.mean()
    with np.errstate(invalid="ignore"):
        rep_rates = rep_rates / np.maximum(n_cell, 1)

    judges = space.judges
    groups = space.groups
    cells = []
    skipped_cells = []
    for j in range(J):
        for g in range(G):
            c = j * G + g
            if n_cell[c] == 0:
                skipped_cells.append((judges[j], groups[g]))
                continue
            obs = obs_cell[c] / n_cell[c]
            rep = rep_rates[:, c]
            lo, hi = np.quantile(rep, [0.05, 0.95])
            tail = min(float(np.mean(rep <= obs)), float(np.mean(rep >= obs)))
            cells.append(CellCheck(
                judge=judges[j], group=groups[g], n_cases=int(n_cell[c]),
                observed_rate=float(obs), predictive_mean=float(rep.mean()),
                predictive_ci90=(float(lo), float(hi)),
                tail_probability=min(2.0 * tail, 1.0),
            ))
    skip_check = None
    if n_released:
        lo, hi = np.quantile(rep_skip, [0.05, 0.95])
        tail = min(float(np.mean(rep_skip <= obs_skip)),
                   float(np.mean(rep_skip >= obs_skip)))
        skip_check = CellCheck(
            judge="*", group="*", n_cases=n_released,
            observed_rate=obs_skip, predictive_mean=float(rep_skip.mean()),
            predictive_ci90=(float(lo), float(hi)),
            tail_probability=min(2.0 * tail, 1.0),
        )
    return PpcReport(cells=cells, skipped_cells=skipped_cells,
                     skip_rate_check=skip_check)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def disparity_report_dict(report: DisparityReport) -> dict:
    return {
        "groups_compared": list(report.groups_compared),
        "n_draws_used": report.n_draws_used,
        "min_over_judges": report.min_over_judges,
        "n_judges": len(report.per_judge),
        "n_above_half": report.n_above_half,
        "n_above_09": report.n_above_09,
        "per_judge": {
            j: {
                "prob_lower_threshold": d.prob_lower_threshold,
                "posterior_mean_gap": d.posterior_mean_gap,
                "ci90_gap": list(d.ci90_gap),
            }
            for j, d in sorted(report.per_judge.items())
        },
    }


def disparity_report_text(report: DisparityReport) -> str:
    a, b = report.groups_compared
    lines = [
        f"Threshold disparity: P(tau[{a}] < tau[{b}]) per judge",
        f"  draws used: {report.n_draws_used}",
        f"  judges with D > 0.5: {report.n_above_half}/{len(report.per_judge)}",
        f"  judges with D > 0.9: {report.n_above_09}/{len(report.per_judge)}",
        f"  min over judges:     {report.min_over_judges:.4f}",
        "",
        f"{'judge':<12} {'D':>8} {'mean gap':>10} {'ci90':>20}",
    ]
    for j, d in sorted(report.per_judge.items()):
        lo, hi = d.ci90_gap
        lines.append(
            f"{j:<12} {d.prob_lower_threshold:>8.4f} "
            f"{d.posterior_mean_gap:>10.4f} [{lo:>8.4f}, {hi:>8.4f}]")
    return "\n".join(lines) + "\n"
