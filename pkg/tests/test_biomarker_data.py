import numpy as np
import pytest

from biomarker_data import (
    N_IDENTITIES,
    NULL_TOKEN,
    SCHEMA,
    TOKEN_DIM,
    Dataset,
    GeneratorConfig,
    NormalizerStats,
    PatientRecord,
    apply_normalizer,
    csv_header,
    encode_tokens,
    fit_normalizer,
    generate_synthetic,
    load_csv,
    partition_halves,
    partition_halves_batch,
    presentation_orders,
    save_csv,
    shuffle_order_augment,
    split_75_25,
    value_slot,
)
from errors import ConfigError, ParseError, ValidationError
from eval_harness import rank_auc
from linalg_core import RngStream


def _record(pid="P1", label=0, od=None, os=None):
    od = od if od is not None else [float(i + 2) for i in range(len(SCHEMA))]
    os = os if os is not None else [float(i + 1) for i in range(len(SCHEMA))]
    ie = tuple(a - b if SCHEMA.has_ie(i) else None for i, (a, b) in enumerate(zip(od, os)))
    return PatientRecord(pid, label, tuple(od), tuple(os), ie)


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic(GeneratorConfig(n_patients=100, seed=3))


class TestSchema:
    def test_codes_and_classes(self):
        assert len(SCHEMA) == 17
        assert SCHEMA.codes[0] == "A-R" and SCHEMA.codes[-1] == "IOP"
        assert SCHEMA.n_classes == 21
        assert SCHEMA.root_class == 20

    def test_ground_truth_parents(self):
        parents = SCHEMA.ground_truth_parents()
        assert parents[SCHEMA.index("I-R")] == 17
        assert parents[SCHEMA.index("CVO")] == 18
        assert parents[SCHEMA.index("GLV")] == 19
        assert parents[SCHEMA.index("IOP")] == 20

    def test_class_labels(self):
        assert [SCHEMA.class_label(k) for k in (0, 17, 18, 19, 20)] == ["A-R", "RNFL", "ONH", "GCC", "ROOT"]

    def test_difference_codes_have_no_ie(self):
        assert not SCHEMA.has_ie(SCHEMA.index("I-ER"))
        assert not SCHEMA.has_ie(SCHEMA.index("I-EG"))
        assert SCHEMA.has_ie(SCHEMA.index("A-R"))

    def test_token_layout(self):
        assert NULL_TOKEN == 17
        assert TOKEN_DIM == 18 + 17 * 3
        assert value_slot(0) == slice(18, 21)
        assert value_slot(16).stop == TOKEN_DIM


class TestGenerator:
    def test_deterministic(self):
        cfg = GeneratorConfig(n_patients=50, seed=11)
        assert generate_synthetic(cfg) == generate_synthetic(cfg)

    def test_ie_is_od_minus_os(self, cohort):
        for r in cohort.records:
            for i, ie in enumerate(r.ie):
                if SCHEMA.has_ie(i):
                    assert abs(ie - (r.od[i] - r.os[i])) <= 1e-6
                else:
                    assert ie is None

    def test_ids_and_labels(self, cohort):
        assert cohort.records[0].patient_id == "P00000"
        assert set(cohort.labels().tolist()) == {0, 1}

    def test_iop_alone_separates_default_cohort(self):
        d = generate_synthetic(GeneratorConfig(n_patients=2000))
        iop = d.values()[:, SCHEMA.index("IOP"), 0]
        assert rank_auc(iop, d.labels()) >= 0.9

    def test_no_separability_means_chance(self):
        d = generate_synthetic(GeneratorConfig(n_patients=2000, separability=0.0))
        iop = d.values()[:, SCHEMA.index("IOP"), 0]
        assert rank_auc(iop, d.labels()) == pytest.approx(0.5, abs=0.05)

    @pytest.mark.parametrize("kwargs", [
        {"n_patients": 3}, {"glaucoma_fraction": 0.0}, {"noise_scale": -1.0}, {"separability": -0.5}, {"seed": -1},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            GeneratorConfig(**kwargs)


class TestCsv:
    def test_round_trip_is_exact(self, cohort, tmp_path):
        path = tmp_path / "cohort.csv"
        save_csv(cohort, path)
        assert load_csv(path) == cohort

    def test_save_is_byte_stable(self, cohort, tmp_path):
        save_csv(cohort, tmp_path / "a.csv")
        save_csv(cohort, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert b"\r\n" not in (tmp_path / "a.csv").read_bytes()

    def test_table_row_parses(self, tmp_path):
        od = [97.0] + [float(i + 2) for i in range(1, len(SCHEMA))]
        os = [91.0] + [float(i + 1) for i in range(1, len(SCHEMA))]
        path = tmp_path / "row.csv"
        save_csv(Dataset(SCHEMA, (_record(od=od, os=os),)), path)
        loaded = load_csv(path).records[0]
        assert loaded.ie[0] == 6.0

    def test_flags_survive_round_trip(self, tmp_path):
        r = _record()
        flagged = PatientRecord(r.patient_id, r.label, r.od, r.os, r.ie, (("A-R_od_flag", "red"),))
        d = Dataset(SCHEMA, (flagged, _record("P2", 1)))
        save_csv(d, tmp_path / "f.csv")
        assert load_csv(tmp_path / "f.csv") == d

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ParseError):
            load_csv(path)

    def test_invalid_utf8_names_line(self, tmp_path):
        path = tmp_path / "latin.csv"
        path.write_bytes(b"patient_id,label\n\xff\xfe,1\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 2

    def test_header_only(self, tmp_path):
        path = tmp_path / "header.csv"
        path.write_text(",".join(csv_header(SCHEMA)) + "\n")
        with pytest.raises(ParseError):
            load_csv(path)

    def test_bad_number_names_line_and_column(self, cohort, tmp_path):
        path = tmp_path / "bad.csv"
        save_csv(cohort, path)
        lines = path.read_text().splitlines()
        cells = lines[2].split(",")
        cells[2] = "abc"
        lines[2] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 3
        assert info.value.column == 3

    def test_ie_mismatch(self, cohort, tmp_path):
        path = tmp_path / "ie.csv"
        save_csv(cohort, path)
        lines = path.read_text().splitlines()
        cells = lines[1].split(",")
        cells[4] = repr(float(cells[4]) + 0.5)
        lines[1] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError):
            load_csv(path)

    def test_wrong_field_count(self, cohort, tmp_path):
        path = tmp_path / "short.csv"
        save_csv(cohort, path)
        lines = path.read_text().splitlines()
        lines[1] = lines[1].rsplit(",", 1)[0]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError):
            load_csv(path)


class TestNormalizer:
    def test_constant_column_normalizes_to_zero(self):
        od = [5.0] * len(SCHEMA)
        d = Dataset(SCHEMA, (_record("a", od=od), _record("b", od=od)))
        out = apply_normalizer(d, fit_normalizer(d))
        np.testing.assert_array_equal(out.values()[:, :, 0], 0.0)

    def test_two_point_column(self):
        first = _record("a", od=[1.0] * len(SCHEMA))
        second = _record("b", od=[3.0] * len(SCHEMA))
        d = Dataset(SCHEMA, (first, second))
        out = apply_normalizer(d, fit_normalizer(d))
        np.testing.assert_allclose(out.values()[:, 0, 0], [-1.0, 1.0])

    def test_training_columns_standardized(self, cohort):
        out = apply_normalizer(cohort, fit_normalizer(cohort))
        values = out.values()
        od = values[:, :, 0]
        np.testing.assert_allclose(od.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(od.std(axis=0), 1.0, atol=1e-6)
        assert out.normalized
        assert np.all(np.isnan(values[:, SCHEMA.index("I-ER"), 2]))

    def test_test_split_keeps_train_statistics(self, cohort):
        train, test = split_75_25(cohort, 1)
        out = apply_normalizer(test, fit_normalizer(train))
        assert not np.allclose(out.values()[:, :, 0].mean(axis=0), 0.0, atol=1e-9)

    def test_stats_serialize(self, cohort):
        stats = fit_normalizer(cohort)
        assert NormalizerStats.from_dict(stats.to_dict()) == stats

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            fit_normalizer(Dataset(SCHEMA, ()))


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(100, (75, 25)), (10, (7, 3))])
    def test_sizes(self, n, sizes):
        d = generate_synthetic(GeneratorConfig(n_patients=n, seed=1))
        train, test = split_75_25(d, 5)
        assert (len(train), len(test)) == sizes
        ids = {r.patient_id for r in train.records}
        assert ids.isdisjoint(r.patient_id for r in test.records)

    def test_same_seed_same_split(self, cohort):
        a, _ = split_75_25(cohort, 9)
        b, _ = split_75_25(cohort, 9)
        assert a == b

    def test_too_small(self):
        d = Dataset(SCHEMA, (_record("a"), _record("b"), _record("c")))
        with pytest.raises(ConfigError):
            split_75_25(d, 0)


class TestPresentationOrder:
    def test_no_shuffle_is_schema_order(self, cohort):
        view = shuffle_order_augment(cohort, 1, RngStream(0), shuffle=False)
        assert len(view) == len(cohort)
        np.testing.assert_array_equal(view.permutations, np.tile(np.arange(17), (len(cohort), 1)))

    def test_copies_multiply_view(self, cohort):
        view = shuffle_order_augment(cohort, 3, RngStream(0))
        assert len(view) == 3 * len(cohort)
        for perm in view.permutations:
            assert sorted(perm.tolist()) == list(range(17))

    def test_fixed_seed_fixed_permutations(self, cohort):
        a = shuffle_order_augment(cohort, 2, RngStream(4))
        b = shuffle_order_augment(cohort, 2, RngStream(4))
        np.testing.assert_array_equal(a.permutations, b.permutations)

    def test_copies_validated(self, cohort):
        with pytest.raises(ConfigError):
            shuffle_order_augment(cohort, 0, RngStream(0))

    def test_identity_partition(self):
        first, second = partition_halves(SCHEMA, range(17))
        assert first == tuple(range(9))
        assert second == tuple(range(9, 17))

    def test_reversed_partition(self):
        first, second = partition_halves(SCHEMA, list(reversed(range(17))))
        assert first == tuple(range(16, 7, -1))
        assert len(second) == 8

    def test_partition_is_exhaustive(self):
        perm = presentation_orders(1, 17, RngStream(2))[0]
        first, second = partition_halves(SCHEMA, perm)
        assert sorted(first + second) == list(range(17))

    @pytest.mark.parametrize("perm", [[0] * 17, list(range(16)), list(range(1, 18))])
    def test_invalid_permutation(self, perm):
        with pytest.raises(ConfigError):
            partition_halves(SCHEMA, perm)

    def test_batch_partition_pads_second_stream(self):
        perms = presentation_orders(4, 17, RngStream(1))
        first, second = partition_halves_batch(perms)
        assert first.shape == second.shape == (9, 4)
        np.testing.assert_array_equal(second[-1], NULL_TOKEN)


class TestTokens:
    def test_encoding(self):
        values = np.zeros((2, 17, 3))
        values[0, 3] = [1.5, -0.5, np.nan]
        index = np.array([[3, 0], [NULL_TOKEN, 3]])
        tokens = encode_tokens(values, index)
        assert tokens.shape == (2, TOKEN_DIM, 2)
        assert tokens[0, 3, 0] == 1.0
        np.testing.assert_array_equal(tokens[0, value_slot(3), 0], [1.5, -0.5, 0.0])
        assert np.count_nonzero(tokens[0, N_IDENTITIES:, 0]) == 2
        np.testing.assert_array_equal(tokens[1, :, 0], np.eye(TOKEN_DIM)[NULL_TOKEN])
