"""CSV ingestion, validation, standardization."""

import numpy as np
import pytest

from threshold_probe.ingest import (
    IngestError,
    SchemaConfig,
    apply_standardization,
    parse_dataset,
    serialize_dataset,
    standardize_features,
    validate_dataset,
)
from threshold_probe.model import build_dataset
from threshold_probe.synthgen import DesignConfig, sample_dataset, \
    sample_ground_truth

from conftest import make_case

SCHEMA = SchemaConfig(feature_columns=("x0", "x1"))

HEADER = "case_id,judge_id,race,bail_assigned,released,skipped,x0,x1\n"

THREE_ROWS = HEADER + (
    "c1,J1,black,1,0,,0.5,-1.0\n"
    "c2,J1,white,0,1,1,0.0,2.25\n"
    "c3,J2,black,0,1,0,-3.5,0.125\n"
)


class TestParseDataset:
    def test_three_row_fixture(self):
        data, report = parse_dataset(THREE_ROWS, SCHEMA)
        assert report.total_rows == 3
        assert report.kept_rows == 3
        assert report.dropped == {}
        expect = build_dataset([
            make_case("c1", "J1", "black", (0.5, -1.0),
                      bail_assigned=True, released=False, skipped=None),
            make_case("c2", "J1", "white", (0.0, 2.25),
                      bail_assigned=False, released=True, skipped=True),
            make_case("c3", "J2", "black", (-3.5, 0.125),
                      bail_assigned=False, released=True, skipped=False),
        ], ("x0", "x1"))
        assert data.judge_index == expect.judge_index
        assert data.group_index == expect.group_index
        assert data.feature_names == expect.feature_names
        for got, want in zip(data.cases, expect.cases):
            assert got.case_id == want.case_id
            assert got.judge == want.judge
            assert got.group == want.group
            assert got.bail_assigned == want.bail_assigned
            assert got.released == want.released
            assert got.skipped == want.skipped
            np.testing.assert_array_equal(got.features, want.features)

    def test_censoring_violation_dropped(self):
        text = HEADER + "c1,J1,black,1,0,1,0.0,0.0\n"
        data, report = parse_dataset(text, SCHEMA)
        assert len(data.cases) == 0
        assert report.dropped == {"censoring violation": 1}

    def test_released_without_outcome_dropped(self):
        text = HEADER + "c1,J1,black,0,1,,0.0,0.0\n"
        data, report = parse_dataset(text, SCHEMA)
        assert report.dropped == {"missing skip outcome for released case": 1}

    def test_boolean_token_variants(self):
        text = HEADER + (
            "c1,J1,black,TRUE,no,,0.0,0.0\n"
            "c2,J1,black,Yes,0,,0.0,0.0\n"
        )
        data, report = parse_dataset(text, SCHEMA)
        assert report.kept_rows == 2
        assert all(c.bail_assigned and not c.released for c in data.cases)

    def test_bad_tokens_counted(self):
        text = HEADER + (
            "c1,J1,black,maybe,0,,0.0,0.0\n"      # bad boolean
            "c2,J1,black,,0,,0.0,0.0\n"           # missing decision
            "c3,J1,black,1,0,,oops,0.0\n"         # unparseable numeric
            "c4,J1,black,1,0,,inf,0.0\n"          # non-finite feature
            "c5,J1,black,1,0,,,0.0\n"             # missing feature
            "c6,,black,1,0,,0.0,0.0\n"            # missing judge
        )
        data, report = parse_dataset(text, SCHEMA)
        assert len(data.cases) == 0
        assert report.dropped == {
            "bad boolean": 1,
            "missing decision field": 1,
            "unparseable numeric": 1,
            "non-finite feature value": 1,
            "missing feature value": 1,
            "missing judge or group label": 1,
        }

    def test_missing_column_fatal(self):
        with pytest.raises(IngestError, match="x1"):
            parse_dataset("case_id,judge_id,race,bail_assigned,released,"
                          "skipped,x0\n", SCHEMA)

    def test_empty_file_with_header(self):
        data, report = parse_dataset(HEADER, SCHEMA)
        assert len(data.cases) == 0
        assert any("no data rows" in w for w in report.warnings)

    def test_totally_empty_fatal(self):
        with pytest.raises(IngestError):
            parse_dataset("", SCHEMA)

    def test_accepts_bytes_and_streams(self):
        import io
        d1, _ = parse_dataset(THREE_ROWS.encode(), SCHEMA)
        d2, _ = parse_dataset(io.BytesIO(THREE_ROWS.encode()), SCHEMA)
        assert d1.fingerprint() == d2.fingerprint()


class TestSchemaConfig:
    def test_distinct_columns_required(self):
        with pytest.raises(ValueError):
            SchemaConfig(feature_columns=("x0",), judge_column="x0")

    def test_custom_columns(self):
        schema = SchemaConfig(feature_columns=("f",), judge_column="court",
                              group_column="grp")
        text = ("case_id,court,grp,bail_assigned,released,skipped,f\n"
                "c1,J1,a,1,0,,1.5\n")
        data, report = parse_dataset(text, schema)
        assert report.kept_rows == 1
        assert data.cases[0].judge == "J1"


class TestRoundTrip:
    def test_parse_serialize_parse_fixed_point(self):
        data1, _ = parse_dataset(THREE_ROWS, SCHEMA)
        text1 = serialize_dataset(data1, SCHEMA)
        data2, report2 = parse_dataset(text1, SCHEMA)
        assert report2.dropped == {}
        assert data1.fingerprint() == data2.fingerprint()
        assert serialize_dataset(data2, SCHEMA) == text1

    def test_round_trip_on_synthetic(self):
        design = DesignConfig(n_judges=3, groups=("a", "b"),
                              cases_per_judge=20, d=2, seed=9)
        truth = sample_ground_truth(design)
        data = sample_dataset(truth, design)
        schema = SchemaConfig(feature_columns=data.feature_names)
        text = serialize_dataset(data, schema)
        parsed, report = parse_dataset(text, schema)
        assert report.dropped == {}
        assert parsed.fingerprint() == data.fingerprint()


class TestStandardize:
    def test_hand_computed(self):
        cases = [make_case(f"c{i}", features=(v,), bail_assigned=True,
                           released=False) for i, v in enumerate((1.0, 2.0, 3.0))]
        data = build_dataset(cases, ("x0",))
        out, warns = standardize_features(data)
        got = [c.features[0] for c in out.cases]
        np.testing.assert_allclose(got, (-1.2247, 0.0, 1.2247), atol=1e-4)
        assert warns == []
        mean, scale = out.standardization[0]
        assert mean == pytest.approx(2.0, abs=1e-12)
        assert scale == pytest.approx(0.8165, abs=1e-4)  # population sd

    def test_idempotent_on_standardized(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=50)
        x = (x - x.mean()) / x.std()
        cases = [make_case(f"c{i}", features=(v,), bail_assigned=True,
                           released=False) for i, v in enumerate(x)]
        out, _ = standardize_features(build_dataset(cases, ("x0",)))
        got = np.array([c.features[0] for c in out.cases])
        np.testing.assert_allclose(got, x, atol=1e-9)

    def test_constant_feature_centered_with_warning(self):
        cases = [make_case(f"c{i}", features=(5.0, float(i)),
                           bail_assigned=True, released=False)
                 for i in range(4)]
        out, warns = standardize_features(build_dataset(cases, ("x0", "x1")))
        assert len(warns) == 1 and "x0" in warns[0]
        assert all(c.features[0] == 0.0 for c in out.cases)

    def test_apply_standardization_round_trip(self):
        cases = [make_case(f"c{i}", features=(v,), bail_assigned=True,
                           released=False) for i, v in enumerate((4.0, 6.0, 11.0))]
        data = build_dataset(cases, ("x0",))
        std, _ = standardize_features(data)
        replayed = apply_standardization(data, std.standardization)
        for a, b in zip(std.cases, replayed.cases):
            np.testing.assert_allclose(a.features, b.features, atol=1e-12)

    def test_too_few_cases(self):
        data = build_dataset([make_case(features=(1.0,))], ("x0",))
        with pytest.raises(IngestError):
            standardize_features(data)


class TestValidateDataset:
    def test_synthetic_ok(self):
        design = DesignConfig(n_judges=2, groups=("a", "b"),
                              cases_per_judge=50, d=1, seed=10)
        truth = sample_ground_truth(design)
        data = sample_dataset(truth, design)
        issues = validate_dataset(data, min_cell_count=1)
        assert [i for i in issues if i.level == "error"] == []

    def test_sparse_cell_warning(self):
        cases = [make_case(f"c{i}", judge="J1", group="a",
                           bail_assigned=True, released=False)
                 for i in range(5)]
        issues = validate_dataset(build_dataset(cases, ()), min_cell_count=10)
        warnings_ = [i for i in issues if i.level == "warning"]
        assert len(warnings_) == 1
        assert "J1" in warnings_[0].message and "a" in warnings_[0].message

    def test_index_coverage_error(self):
        data = build_dataset([make_case(judge="J1")], ())
        broken = type(data)(
            cases=data.cases, judge_index={}, group_index=data.group_index,
            feature_names=data.feature_names)
        issues = validate_dataset(broken)
        assert any(i.level == "error" and "index coverage" in i.message
                   for i in issues)
