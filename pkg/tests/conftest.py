"""Shared test fixtures and small dataset builders."""

import numpy as np
import pytest

from threshold_probe.model import (
    Case,
    Hyperparams,
    JudgeParams,
    ModelParams,
    SkipModelParams,
    build_dataset,
)


def make_case(case_id="c0", judge="J0", group="g", features=(),
              bail_assigned=True, released=False, skipped=None):
    return Case(case_id=case_id, judge=judge, group=group,
                features=np.asarray(features, dtype=float),
                bail_assigned=bail_assigned, released=released,
                skipped=skipped)


def simple_params(judges=("J0",), groups=("g",), d=0, tau=0.0, log_kappa=0.0,
                  intercept=0.0, coefficients=None):
    """One shared threshold/sharpness value for every judge and group."""
    if coefficients is None:
        coefficients = np.zeros(d)
    return ModelParams(
        skip=SkipModelParams(intercept=intercept,
                             coefficients=np.asarray(coefficients, float)),
        judges=JudgeParams(
            thresholds={(j, g): tau for j in judges for g in groups},
            log_sharpness={j: log_kappa for j in judges},
        ),
        hyper=Hyperparams(
            group_mean={g: 0.0 for g in groups},
            group_sd={g: 1.0 for g in groups},
            sharpness_mean=0.0,
            sharpness_sd=1.0,
        ),
    )


@pytest.fixture
def two_case_dataset():
    cases = [
        make_case("c0", "J0", "g", (1.0,), bail_assigned=True, released=False),
        make_case("c1", "J0", "g", (-1.0,), bail_assigned=False, released=True,
                  skipped=False),
    ]
    return build_dataset(cases, ("x0",))
