"""Core model: probabilities, likelihood, priors, flattening, gradient."""

import math

import numpy as np
import pytest

from threshold_probe.model import (
    Case,
    CaseArrays,
    DimensionError,
    Hyperparams,
    ParamSpace,
    PriorConfig,
    SkipModelParams,
    StructuralError,
    build_dataset,
    case_log_likelihood,
    decision_probability,
    log_posterior,
    log_posterior_flat,
    log_posterior_gradient,
    log_prior,
    log_prior_flat,
    sigmoid,
    skip_probability,
    threshold_to_cost_ratio,
)
from threshold_probe.synthgen import (
    DesignConfig,
    sample_dataset,
    sample_ground_truth,
)

from conftest import make_case, simple_params

# independently evaluated logistic values, frozen
SIGMA_2 = 0.8807970779778823  # sigma(2)
SIGMA_NEG2 = 0.11920292202211755  # sigma(-2)
LOG_HALF = -0.6931471805599453
STD_NORMAL_AT_0 = -0.9189385332046727  # -0.5*log(2*pi)


# ---------------------------------------------------------------------------
# scalar operations
# ---------------------------------------------------------------------------


class TestSkipProbability:
    def test_zero_logit(self):
        skip = SkipModelParams(intercept=0.0, coefficients=np.zeros(2))
        assert skip_probability(skip, (3.1, -7.0)) == 0.5

    def test_intercept_only(self):
        skip = SkipModelParams(intercept=2.0, coefficients=np.empty(0))
        assert skip_probability(skip, ()) == pytest.approx(SIGMA_2, abs=1e-12)

    def test_logit_cancels(self):
        skip = SkipModelParams(intercept=1.0, coefficients=np.array([2.0]))
        assert skip_probability(skip, (-0.5,)) == 0.5

    def test_dimension_mismatch(self):
        skip = SkipModelParams(intercept=0.0, coefficients=np.zeros(2))
        with pytest.raises(DimensionError):
            skip_probability(skip, (1.0,))

    def test_clamped_away_from_bounds(self):
        skip = SkipModelParams(intercept=500.0, coefficients=np.empty(0))
        p = skip_probability(skip, ())
        assert 0.0 < p < 1.0

    def test_monotone_in_logit(self):
        skip_lo = SkipModelParams(intercept=-1.0, coefficients=np.empty(0))
        skip_hi = SkipModelParams(intercept=1.0, coefficients=np.empty(0))
        assert skip_probability(skip_lo, ()) < skip_probability(skip_hi, ())


class TestDecisionProbability:
    def test_at_threshold(self):
        assert decision_probability(tau=0.0, kappa=1.0, p=0.5) == 0.5

    def test_scalar_logistic(self):
        p = float(sigmoid(1.0))
        assert decision_probability(tau=0.0, kappa=2.0, p=p) == pytest.approx(
            SIGMA_2, abs=1e-12)

    def test_threshold_boundary(self):
        for p in (0.1, 0.5, 0.93):
            tau = math.log(p / (1 - p))
            for kappa in (0.3, 1.0, 50.0):
                assert decision_probability(tau, kappa, p) == pytest.approx(
                    0.5, abs=1e-12)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            decision_probability(0.0, 0.0, 0.5)
        with pytest.raises(ValueError):
            decision_probability(0.0, -1.0, 0.5)
        with pytest.raises(ValueError):
            decision_probability(0.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            decision_probability(0.0, 1.0, 1.0)

    def test_monotone_in_p(self):
        qs = [decision_probability(0.3, 2.0, p)
              for p in np.linspace(0.01, 0.99, 25)]
        assert all(a < b for a, b in zip(qs, qs[1:]))

    def test_sharpness_limit(self):
        # huge kappa: decision is a step around p = sigma(tau)
        assert decision_probability(0.0, 1e6, 0.51) > 0.999
        assert decision_probability(0.0, 1e6, 0.49) < 0.001


class TestThresholdToCostRatio:
    def test_symmetric_indifference(self):
        assert threshold_to_cost_ratio(0.0) == 0.5

    def test_negative_two(self):
        assert threshold_to_cost_ratio(-2.0) == pytest.approx(SIGMA_NEG2,
                                                              abs=1e-12)

    def test_limit(self):
        assert threshold_to_cost_ratio(40.0) == pytest.approx(1.0, abs=1e-12)
        assert threshold_to_cost_ratio(-40.0) == pytest.approx(0.0, abs=1e-12)


class TestSigmoid:
    def test_extreme_arguments_finite(self):
        vals = sigmoid(np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0]))
        assert np.all(np.isfinite(vals))
        assert np.all((vals >= 0.0) & (vals <= 1.0))

    def test_symmetry(self):
        x = np.linspace(-5, 5, 41)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)


# ---------------------------------------------------------------------------
# case likelihood
# ---------------------------------------------------------------------------


class TestCaseLogLikelihood:
    def test_all_logits_zero_detained(self):
        params = simple_params()
        case = make_case(bail_assigned=True, released=False)
        assert case_log_likelihood(params, case) == pytest.approx(LOG_HALF,
                                                                  abs=1e-12)

    def test_all_logits_zero_released(self):
        params = simple_params()
        case = make_case(bail_assigned=False, released=True, skipped=False)
        assert case_log_likelihood(params, case) == pytest.approx(
            2 * LOG_HALF, abs=1e-12)

    def test_matches_naive_oracle(self):
        # independently coded straight-line evaluation of the two terms
        rng = np.random.default_rng(42)
        for _ in range(25):
            d = int(rng.integers(0, 3))
            params = simple_params(
                d=d, tau=float(rng.normal()), log_kappa=float(rng.normal()),
                intercept=float(rng.normal()), coefficients=rng.normal(size=d))
            released = bool(rng.random() < 0.5)
            case = make_case(
                features=rng.normal(size=d),
                bail_assigned=not released, released=released,
                skipped=bool(rng.random() < 0.5) if released else None)
            eta = params.skip.intercept + float(
                params.skip.coefficients @ case.features)
            p = 1.0 / (1.0 + math.exp(-eta))
            kappa = math.exp(params.judges.log_sharpness["J0"])
            z = kappa * (math.log(p / (1 - p)) - params.judges.thresholds[("J0", "g")])
            q = 1.0 / (1.0 + math.exp(-z))
            expect = math.log(q) if case.bail_assigned else math.log(1 - q)
            if released:
                expect += math.log(p) if case.skipped else math.log(1 - p)
            assert case_log_likelihood(params, case) == pytest.approx(
                expect, abs=1e-10)

    def test_missing_judge_group(self):
        params = simple_params()
        with pytest.raises(StructuralError):
            case_log_likelihood(params, make_case(judge="J9"))
        with pytest.raises(StructuralError):
            case_log_likelihood(params, make_case(group="h"))

    def test_censoring_invariant_enforced(self):
        with pytest.raises(ValueError):
            make_case(released=True, skipped=None, bail_assigned=False)
        with pytest.raises(ValueError):
            make_case(released=False, skipped=True)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def _independent_log_prior_at_zero(n_judges, n_groups, d):
    """Straight-line recomputation of the prior at the all-zeros vector."""
    def normal_lpdf(x, m, s):
        return -math.log(s) - 0.5 * math.log(2 * math.pi) - (x - m) ** 2 / (2 * s * s)

    def half_normal_at_log_zero(scale):
        # value of the transformed HalfNormal density at u = 0 (sigma = 1)
        return math.log(2.0) + normal_lpdf(1.0, 0.0, scale) + 0.0

    lp = (1 + d) * normal_lpdf(0.0, 0.0, 1.0)          # beta0, betas
    lp += n_judges * n_groups * normal_lpdf(0.0, 0.0, 1.0)  # tau | mu=0, sigma=1
    lp += n_judges * normal_lpdf(0.0, 0.0, 1.0)        # log kappa | 0, 1
    lp += n_groups * normal_lpdf(0.0, 0.0, 2.0)        # mu
    lp += n_groups * half_normal_at_log_zero(1.0)      # log sigma
    lp += normal_lpdf(0.0, 0.0, 1.0)                   # mu_kappa
    lp += half_normal_at_log_zero(0.5)                 # log sigma_kappa
    return lp


class TestLogPrior:
    def test_all_zeros_vector(self):
        space = ParamSpace(("J0", "J1"), ("a", "b"), ("x0",))
        got = log_prior_flat(space, np.zeros(space.dim))
        assert got == pytest.approx(
            _independent_log_prior_at_zero(2, 2, 1), abs=1e-10)

    def test_std_normal_at_zero_constant(self):
        space = ParamSpace((), (), ())
        # only beta0 (N(0,1)) plus the kappa-level hyperpriors remain
        base = log_prior_flat(space, np.zeros(space.dim))
        expect = (STD_NORMAL_AT_0                      # beta0
                  + STD_NORMAL_AT_0                    # mu_kappa
                  + math.log(2.0) + (-math.log(0.5) + STD_NORMAL_AT_0
                                     - 1.0 / (2 * 0.25)))  # sigma_kappa at 1
        assert base == pytest.approx(expect, abs=1e-10)

    def test_more_judges_lower_prior(self):
        small = ParamSpace(("J0",), ("g",), ())
        big = ParamSpace(("J0", "J1"), ("g",), ())
        assert (log_prior_flat(big, np.zeros(big.dim))
                < log_prior_flat(small, np.zeros(small.dim)))

    def test_structured_matches_flat(self):
        design = DesignConfig(n_judges=3, groups=("a", "b"),
                              cases_per_judge=4, d=2, seed=7)
        truth = sample_ground_truth(design)
        data = sample_dataset(truth, design)
        space = ParamSpace.from_dataset(data)
        assert log_prior(truth, space=space) == pytest.approx(
            log_prior_flat(space, space.flatten(truth)), abs=1e-10)


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------


class TestLogPosterior:
    def test_empty_dataset_is_prior(self):
        data = build_dataset([], ("x0",), judges=("J0",), groups=("g",))
        params = simple_params(d=1)
        space = ParamSpace.from_dataset(data)
        assert log_posterior(params, data) == pytest.approx(
            log_prior(params, space=space), abs=1e-12)

    def test_one_case_additivity(self):
        case = make_case(features=(0.3,), bail_assigned=True, released=False)
        data = build_dataset([case], ("x0",))
        params = simple_params(d=1, tau=0.4, log_kappa=0.2, intercept=-0.1,
                               coefficients=(0.7,))
        space = ParamSpace.from_dataset(data)
        assert log_posterior(params, data) == pytest.approx(
            log_prior(params, space=space) + case_log_likelihood(params, case),
            abs=1e-10)

    def test_matches_naive_summation_oracle(self):
        from threshold_probe.synthgen import _naive_log_posterior
        rng = np.random.default_rng(11)
        for seed in range(5):
            design = DesignConfig(n_judges=2, groups=("a", "b"),
                                  cases_per_judge=5, d=2, seed=seed)
            truth = sample_ground_truth(design)
            data = sample_dataset(truth, design)
            space = ParamSpace.from_dataset(data)
            arrays = CaseArrays.from_dataset(data)
            v = rng.normal(0.0, 0.8, space.dim)
            assert log_posterior_flat(space, v, arrays) == pytest.approx(
                _naive_log_posterior(space, v, data, PriorConfig()), abs=1e-10)


# ---------------------------------------------------------------------------
# flattening
# ---------------------------------------------------------------------------


class TestParamSpace:
    def test_round_trip(self):
        design = DesignConfig(n_judges=3, groups=("a", "b"),
                              cases_per_judge=4, d=2, seed=5)
        truth = sample_ground_truth(design)
        data = sample_dataset(truth, design)
        space = ParamSpace.from_dataset(data)
        v = space.flatten(truth)
        again = space.flatten(space.unflatten(v))
        np.testing.assert_allclose(again, v, rtol=0, atol=1e-15)

    def test_names_layout(self):
        space = ParamSpace(("J0", "J1"), ("a", "b"), ("x0",))
        names = space.names()
        assert names[0] == "beta0"
        assert names[1] == "beta[x0]"
        assert names[2] == "tau[judge=J0,group=a]"
        assert names[3] == "tau[judge=J0,group=b]"
        assert names[4] == "tau[judge=J1,group=a]"
        assert names[-2:] == ["mu_kappa", "log_sigma_kappa"]
        assert len(names) == space.dim

    def test_index_helpers_agree_with_names(self):
        space = ParamSpace(("J0", "J1"), ("a", "b"), ("x0", "x1"))
        names = space.names()
        assert names[space.tau_index("J1", "a")] == "tau[judge=J1,group=a]"
        assert names[space.logkappa_index("J0")] == "log_kappa[judge=J0]"

    def test_wrong_length_vector(self):
        space = ParamSpace(("J0",), ("g",), ())
        with pytest.raises(DimensionError):
            space.unflatten(np.zeros(space.dim + 1))

    def test_positive_params_on_log_scale(self):
        space = ParamSpace(("J0",), ("g",), ())
        v = np.zeros(space.dim)
        v[space.sl_logsigma] = math.log(2.5)
        v[space.i_logsigma_kappa] = math.log(0.25)
        params = space.unflatten(v)
        assert params.hyper.group_sd["g"] == pytest.approx(2.5)
        assert params.hyper.sharpness_sd == pytest.approx(0.25)

    def test_feature_dimension_checked_in_build(self):
        with pytest.raises(DimensionError):
            build_dataset([make_case(features=(1.0, 2.0))], ("x0",))


class TestDatasetFingerprint:
    def test_stable_and_sensitive(self):
        design = DesignConfig(n_judges=2, groups=("g",), cases_per_judge=3,
                              d=1, seed=0)
        truth = sample_ground_truth(design)
        data = sample_dataset(truth, design)
        assert data.fingerprint() == data.fingerprint()
        other = sample_dataset(truth, design, seed=1)
        assert data.fingerprint() != other.fingerprint()


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------


def _finite_difference(space, v, arrays, h=1e-5):
    fd = np.empty(space.dim)
    for i in range(space.dim):
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        fd[i] = (log_posterior_flat(space, vp, arrays)
                 - log_posterior_flat(space, vm, arrays)) / (2 * h)
    return fd


class TestGradient:
    def test_prior_only_gradient(self):
        data = build_dataset([], ("x0",), judges=("J0", "J1"), groups=("g",))
        space = ParamSpace.from_dataset(data)
        arrays = CaseArrays.from_dataset(data)
        rng = np.random.default_rng(3)
        v = rng.normal(0.0, 0.6, space.dim)
        g = log_posterior_gradient(space, v, arrays)
        fd = _finite_difference(space, v, arrays)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)

    def test_mirror_cases_cancel_coefficient_gradient(self):
        x = np.array([0.7, -1.3])
        cases = [
            make_case("c0", features=x, bail_assigned=True, released=False),
            make_case("c1", features=-x, bail_assigned=True, released=False),
        ]
        data = build_dataset(cases, ("x0", "x1"))
        space = ParamSpace.from_dataset(data)
        arrays = CaseArrays.from_dataset(data)
        v = np.zeros(space.dim)
        v[0] = 0.4  # nonzero intercept, zero coefficients
        g = log_posterior_gradient(space, v, arrays)
        np.testing.assert_allclose(g[1:3], 0.0, atol=1e-12)

    def test_randomized_instances_match_fd(self):
        rng = np.random.default_rng(19)
        for seed in range(10):
            design = DesignConfig(
                n_judges=int(rng.integers(1, 4)), groups=("a", "b"),
                cases_per_judge=int(rng.integers(2, 6)),
                d=int(rng.integers(0, 3)), seed=seed)
            truth = sample_ground_truth(design)
            data = sample_dataset(truth, design)
            space = ParamSpace.from_dataset(data)
            arrays = CaseArrays.from_dataset(data)
            v = rng.normal(0.0, 0.7, space.dim)
            g = log_posterior_gradient(space, v, arrays)
            fd = _finite_difference(space, v, arrays)
            rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)
            assert float(rel.max()) < 1e-6

    def test_nonfinite_gradient_names_coordinate(self):
        data = build_dataset(
            [make_case(bail_assigned=True, released=False)], ())
        space = ParamSpace.from_dataset(data)
        arrays = CaseArrays.from_dataset(data)
        v = np.zeros(space.dim)
        v[space.i_logsigma_kappa] = 500.0  # exp overflows
        with pytest.raises(FloatingPointError):
            log_posterior_gradient(space, v, arrays)
