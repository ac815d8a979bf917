import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from glimpse_iqa.data import ArraySplit
from glimpse_iqa.data import Sample
from glimpse_iqa.evaluation import (DegenerateInputError, MetricReport, SplitFailure, attention_test,
                                    block_centers, build_report, confusion_matrix, distance_to_blocks,
                                    evaluate, lcc, median_over_splits, predict, srocc,
                                    uniform_fixation_distance)
from glimpse_iqa.gradcheck import REDUCED
from glimpse_iqa.net import init_params, replace_params


def test_srocc_examples():
    t = [1.0, 2.0, 3.0, 5.0]
    assert srocc(t, t) == 1.0
    assert srocc(t[::-1], t) == -1.0
    u = [3.0, 1.0, 2.0, 5.0]
    assert srocc(u, u) == 1.0 and srocc([-v for v in u], u) == -1.0


def test_srocc_matches_rank_oracle_with_ties(rng):
    for _ in range(100):
        n = int(rng.integers(3, 40))
        p = rng.integers(0, 6, n).astype(float)  # plenty of ties
        t = rng.standard_normal(n).round(1)
        if len(set(p)) < 2 or len(set(t)) < 2:
            continue
        assert abs(srocc(p, t) - oracles.spearman(p, t)) < 1e-12


def test_lcc_examples_and_oracle(rng):
    t = rng.standard_normal(30)
    assert abs(lcc(2 * t + 3, t) - 1.0) < 1e-15
    assert abs(lcc(-t, t) + 1.0) < 1e-15
    for _ in range(100):
        p, t = rng.standard_normal(25), rng.standard_normal(25)
        assert abs(lcc(p, t) - oracles.pearson(p, t)) < 1e-12


def test_degenerate_inputs_raise():
    with pytest.raises(DegenerateInputError):
        srocc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateInputError):
        lcc([1.0, 2.0], [4.0, 4.0])
    with pytest.raises(ValueError):
        lcc([1.0], [2.0])
    with pytest.raises(ValueError):
        srocc([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=3, max_size=30, unique=True),
       st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_invariances_and_symmetry(p, scale, shift, seed):
    # a 1e-3 grid keeps the transforms strictly increasing in floating point
    p = np.asarray(p) / 1e3
    t = np.random.default_rng(seed).standard_normal(p.size)
    assert abs(srocc(scale * p + shift, t) - srocc(p, t)) < 1e-12
    assert abs(srocc(np.exp(p / 1e3), t) - srocc(p, t)) < 1e-12
    assert abs(lcc(scale * p + shift, t) - lcc(p, t)) < 1e-9
    assert srocc(p, t) == pytest.approx(srocc(t, p), abs=1e-15)


def test_confusion_and_report_by_hand():
    true = np.array([0] * 5 + [1] * 5 + [2] * 5 + [3] * 5)
    pred = np.array([0, 0, 0, 1, 0, 1, 1, 2, 1, 1, 2, 2, 2, 2, 2, 3, 0, 3, 3, 3])
    expected = np.array([[4, 1, 0, 0],
                         [0, 4, 1, 0],
                         [0, 0, 5, 0],
                         [1, 0, 0, 4]])
    np.testing.assert_array_equal(confusion_matrix(true, pred, 4), expected)
    scores = np.arange(20, dtype=float)
    rep = build_report(scores, scores[::-1] * 0 + scores, pred, true, 4, ["a", "b", "c", "d"])
    np.testing.assert_array_equal(rep.confusion, expected)
    assert rep.accuracy == 17 / 20
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), [5, 5, 5, 5])
    assert rep.srocc == 1.0 and rep.per_type_srocc == {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
    assert "true\\pred,a,b,c,d" in rep.confusion_csv()
    assert "srocc,1.0" in rep.to_csv() and "srocc[c],1.0" in rep.to_csv()


def test_single_class_accuracy():
    rep = build_report([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0], [2, 2, 0, 2], [2, 2, 2, 2], 3)
    assert rep.accuracy == 0.75


def test_constant_predictions_flag_degenerate():
    rep = build_report([5.0] * 4, [1.0, 2.0, 3.0, 4.0], [0, 0, 0, 0], [0, 1, 0, 1], 2)
    assert rep.degenerate and rep.srocc is None and rep.lcc is None
    assert "SROCC       undefined" in rep.summary()
    assert "srocc,undefined" in rep.to_csv()


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        build_report([], [], [], [], 2)


def make_split(n=6, side=40, seed=0):
    r = np.random.default_rng(seed)
    return ArraySplit(r.standard_normal((n, side, side)), r.uniform(1, 9, n),
                      r.integers(0, 4, n), np.ones(n, int), np.arange(n))


def test_evaluate_is_repeatable_and_centre_start():
    params = init_params(REDUCED, np.random.default_rng(0))
    split = make_split()
    a, b = evaluate(params, REDUCED, split), evaluate(params, REDUCED, split)
    np.testing.assert_array_equal(a.predicted_scores, b.predicted_scores)
    np.testing.assert_array_equal(a.confusion, b.confusion)
    _, _, locs = predict(params, REDUCED, split.images)
    assert locs.shape == (6, 3, 2) and np.all(locs[:, 0] == 0.0)
    _, _, locs_small_batch = predict(params, REDUCED, split.images, batch_size=4)
    np.testing.assert_array_equal(locs, locs_small_batch)


def test_evaluate_constant_model_is_degenerate():
    params = init_params(REDUCED, np.random.default_rng(0))
    const = replace_params(params, {"score.fc2.weight": np.zeros(params["score.fc2.weight"].shape)})
    rep = evaluate(const, REDUCED, make_split())
    assert rep.degenerate


def fake_report(value):
    return MetricReport(value, value, value, np.eye(2, dtype=int))


def test_median_over_splits():
    vals = {0: 0.3, 1: 0.1, 2: 0.5, 3: 0.2, 4: 0.4}
    rep = median_over_splits(lambda s: fake_report(vals[s]))
    assert rep.srocc == rep.lcc == rep.accuracy == 0.3
    assert median_over_splits(lambda s: fake_report(0.7)).srocc == 0.7


def test_median_over_splits_failures():
    def run(seed):
        if seed == 3:
            raise RuntimeError("diverged")
        return fake_report(0.5)

    with pytest.raises(SplitFailure, match="split seed 3"):
        median_over_splits(run)
    with pytest.raises(ValueError):
        median_over_splits(lambda s: fake_report(0.5), n_splits=4)


def test_block_geometry_by_hand():
    np.testing.assert_array_equal(block_centers([(0, 0, 4), (10, 20, 5)]), [[1.5, 1.5], [12.0, 22.0]])
    # image 41x41: loc (0, 0) is pixel (20, 20); nearest centre (12, 22)
    assert distance_to_blocks([0.0, 0.0], [(10, 20, 5), (36, 36, 5)], (41, 41)) == np.hypot(8, 2)
    with pytest.raises(ValueError):
        distance_to_blocks([0.0, 0.0], [], (41, 41))


def test_uniform_distance_matches_grid_average():
    blocks, shape = [(4, 4, 8), (20, 26, 8)], (40, 40)
    rows, cols = np.meshgrid(np.linspace(0, 39, 400), np.linspace(0, 39, 400), indexing="ij")
    centres = block_centers(blocks)
    d = np.min([np.hypot(rows - r, cols - c) for r, c in centres], axis=0)
    mc = uniform_fixation_distance(blocks, shape, n=20000, rng=np.random.default_rng(1))
    assert abs(mc - d.mean()) < 0.1


def blocky_split(blocks, n=20):
    r = np.random.default_rng(3)
    samples = [Sample(5.0, 2, 1, i, image=np.zeros((40, 40)), blocks=blocks) for i in range(n)]
    return ArraySplit(r.standard_normal((n, 40, 40)), np.full(n, 5.0), np.full(n, 2),
                      np.ones(n, int), np.arange(n), samples)


def test_attention_test_detects_centre_bias():
    # an untrained location head barely moves, so fixations stay near the centre
    params = init_params(REDUCED, np.random.default_rng(0))
    near = attention_test(params, REDUCED, blocky_split(((16, 16, 8),)), n_resamples=999)
    assert near.informative and near.pvalue < 0.01 and near.n == 20
    # opposite corners: the centre is farther from both than a random point is on average
    far = attention_test(params, REDUCED, blocky_split(((0, 0, 8), (32, 32, 8))), n_resamples=999)
    assert not far.informative and far.pvalue > 0.5
    assert "p=" in near.summary()
    with pytest.raises(ValueError):
        attention_test(params, REDUCED, make_split())
