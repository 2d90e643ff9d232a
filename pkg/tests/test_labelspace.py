import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpals.labelspace import (
    ClientMarginalSet,
    LabelMarginal,
    MarginalFileError,
    check_coverage,
    dump_marginal_doc,
    empirical_marginal,
    load_marginal_file,
    projection_distance,
    save_marginal_file,
)
from oracles import simplex_grid

S_TWO = ClientMarginalSet.from_arrays([[0.5, 0.5, 0.0], [0.5, 0.0, 0.5]], [40, 18])


class TestLabelMarginal:
    def test_renormalizes_within_tolerance(self):
        m = LabelMarginal([0.5 + 4e-10, 0.5])
        assert m.probs.sum() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            LabelMarginal(bad)

    def test_immutable(self):
        m = LabelMarginal([0.25, 0.75])
        with pytest.raises(ValueError):
            m.probs[0] = 1.0


class TestClientMarginalSet:
    def test_rejects_zero_size(self):
        with pytest.raises(ValueError, match=">= 1"):
            ClientMarginalSet.from_arrays([[1.0, 0.0]], [0])

    def test_rejects_mixed_K(self):
        with pytest.raises(ValueError, match="differing class counts"):
            ClientMarginalSet((LabelMarginal([1.0, 0.0]), LabelMarginal([1.0, 0.0, 0.0])), [1, 1])

    def test_rejects_fractional_size(self):
        with pytest.raises(ValueError, match="integers"):
            ClientMarginalSet.from_arrays([[1.0, 0.0]], [1.5])

    def test_subset(self):
        sub = S_TWO.subset([1])
        assert sub.M == 1 and sub.sizes.tolist() == [18] and sub.ids == ("1",)


class TestEmpiricalMarginal:
    def test_counts(self):
        np.testing.assert_array_equal(empirical_marginal([0, 0, 1, 2], 3).probs, [0.5, 0.25, 0.25])

    def test_single_class(self):
        np.testing.assert_array_equal(empirical_marginal([1, 1, 1], 2).probs, [0.0, 1.0])

    def test_interleaved_two_class(self):
        labels = np.tile([0, 1], 40)
        np.testing.assert_array_equal(empirical_marginal(labels, 3).probs, [0.5, 0.5, 0.0])

    def test_empty(self):
        with pytest.raises(ValueError, match="empty dataset"):
            empirical_marginal(np.array([], dtype=int), 3)

    @pytest.mark.parametrize("labels", [[0, 3], [-1, 0]])
    def test_out_of_range(self, labels):
        with pytest.raises(ValueError, match="out of range"):
            empirical_marginal(labels, 3)


class TestCoverage:
    def test_in_hull_target(self):
        covered, res = check_coverage(LabelMarginal([0.5, 0.25, 0.25]), S_TWO)
        assert covered and res < 1e-12

    def test_out_of_hull_target(self):
        covered, res = check_coverage(LabelMarginal([0.0, 0.5, 0.5]), S_TWO)
        assert not covered and res > 0.1

    def test_vertex(self):
        covered, res = check_coverage(S_TWO.marginals[0], S_TWO)
        assert covered and res < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            check_coverage(LabelMarginal([0.5, 0.5]), S_TWO)


class TestProjectionDistance:
    def test_in_hull(self):
        assert projection_distance(LabelMarginal([0.5, 0.25, 0.25]), S_TWO) < 1e-12

    def test_external_target_matches_line_search(self):
        T = np.array([0.0, 0.5, 0.5])
        a = np.arange(100_001) / 100_000
        pts = np.outer(a, S_TWO.matrix[0]) + np.outer(1 - a, S_TWO.matrix[1])
        grid = float(np.min(np.sum((pts - T) ** 2, axis=1)))
        d = projection_distance(LabelMarginal(T), S_TWO)
        assert d == pytest.approx(0.375, abs=1e-12)
        assert d == pytest.approx(grid, abs=1e-9)

    def test_client_marginal_target(self):
        assert projection_distance(S_TWO.marginals[1], S_TWO) < 1e-12

    def test_matches_simplex_grid_three_clients(self, rng):
        for _ in range(5):
            S = rng.dirichlet(np.ones(4), 3)
            T = rng.dirichlet(np.ones(4))
            pts = simplex_grid(3, 2e-3)
            grid = float(np.min(np.sum((pts @ S - T) ** 2, axis=1)))
            d = projection_distance(LabelMarginal(T), ClientMarginalSet.from_arrays(S, [5, 5, 5]))
            assert d <= grid + 1e-12
            assert d == pytest.approx(grid, abs=1e-4)


@st.composite
def hull_problem(draw):
    M = draw(st.integers(1, 6))
    K = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    S = rng.dirichlet(np.ones(K), M)
    n = rng.integers(1, 200, M)
    return rng, S, n


@settings(max_examples=60, deadline=None)
@given(hull_problem())
def test_explicit_combination_has_zero_distance(prob):
    rng, S, n = prob
    w = rng.dirichlet(np.ones(S.shape[0]))
    T = LabelMarginal(w @ S)
    assert projection_distance(T, ClientMarginalSet.from_arrays(S, n)) < 1e-8


@settings(max_examples=60, deadline=None)
@given(hull_problem())
def test_distance_invariant_under_permutations(prob):
    rng, S, n = prob
    T = rng.dirichlet(np.ones(S.shape[1]))
    base = projection_distance(LabelMarginal(T), ClientMarginalSet.from_arrays(S, n))
    rows = rng.permutation(S.shape[0])
    cols = rng.permutation(S.shape[1])
    permuted = projection_distance(LabelMarginal(T[cols]), ClientMarginalSet.from_arrays(S[rows][:, cols], n[rows]))
    assert permuted == pytest.approx(base, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(hull_problem())
def test_distance_bounded_by_every_vertex(prob):
    rng, S, n = prob
    T = rng.dirichlet(np.ones(S.shape[1]))
    d = projection_distance(LabelMarginal(T), ClientMarginalSet.from_arrays(S, n))
    assert d <= float(np.min(np.sum((S - T) ** 2, axis=1))) + 1e-12


class TestMarginalFile:
    def test_round_trip(self, tmp_path):
        T = LabelMarginal([0.5, 0.25, 0.25])
        p = tmp_path / "m.json"
        save_marginal_file(p, S_TWO, T)
        S2, T2 = load_marginal_file(p)
        np.testing.assert_array_equal(S2.matrix, S_TWO.matrix)
        np.testing.assert_array_equal(S2.sizes, S_TWO.sizes)
        assert T2 == T

    def test_target_optional(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps(dump_marginal_doc(S_TWO)))
        assert load_marginal_file(p)[1] is None

    @pytest.mark.parametrize(
        "doc, field",
        [
            ({"clients": []}, "clients"),
            ({"clients": [{"id": "a", "probs": [1.0]}]}, "'n'"),
            ({"clients": [{"id": "a", "n": 0, "probs": [1.0, 0.0]}]}, "clients[0].n"),
            ({"clients": [{"id": "a", "n": 3, "probs": [0.7, 0.7]}]}, "clients[0].probs"),
            ({"clients": [{"id": "a", "n": 3, "probs": [1.0, 0.0]}], "target": {"probs": [1.0]}}, "target.probs"),
            ({"clients": [{"id": "a", "n": 3, "probs": [1.0, 0.0]}], "target": {}}, "target"),
        ],
    )
    def test_malformed_names_field(self, tmp_path, doc, field):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(MarginalFileError) as exc:
            load_marginal_file(p)
        assert field in str(exc.value)

    def test_syntax_error_has_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"clients": [\n  {"id": 1 "n": 2}]}')
        with pytest.raises(MarginalFileError, match="line 2"):
            load_marginal_file(p)
