import numpy as np

from models import ScoreSeries
from sampler import Verdict, cap_selection, decide, sample_for_downstream, select_frames, uniform_indices


def _series(values):
    return ScoreSeries(video_id="v", scores=values)


def test_select_frames_example():
    assert select_frames(_series([0.9, 0.5, 0.81]), 0.8) == [0, 2]


def test_threshold_is_strict():
    assert select_frames(_series([0.8, 0.80001]), 0.8) == [1]


def test_selection_shrinks_as_theta_grows():
    rng = np.random.default_rng(0)
    thetas = np.linspace(0.05, 0.95, 19)
    for _ in range(200):
        series = _series(rng.random(int(rng.integers(1, 80))))
        sizes = [len(select_frames(series, t)) for t in thetas]
        assert sizes == sorted(sizes, reverse=True)
        assert select_frames(series, float(series.scores.max())) == []
        assert select_frames(series, 0.5) == np.flatnonzero(series.scores > 0.5).tolist()


def test_fallback_is_uniform():
    indices, verdict = sample_for_downstream(_series([0.1] * 80), 0.8, 8)
    assert indices == [0, 10, 20, 30, 40, 50, 60, 70]
    assert verdict == Verdict.NORMAL_FALLBACK


def test_single_high_score_is_anomalous():
    values = [0.1] * 30
    values[17] = 0.99
    assert sample_for_downstream(_series(values), 0.8, 8) == ([17], Verdict.ANOMALOUS)


def test_never_empty():
    rng = np.random.default_rng(1)
    for _ in range(100):
        series = _series(rng.random(int(rng.integers(1, 40))))
        indices, _ = sample_for_downstream(series, float(rng.uniform(0.1, 0.99)), 8)
        assert indices


def test_short_video_fallback_keeps_every_snippet():
    assert uniform_indices(3, 8) == [0, 1, 2]


def test_cap_keeps_highest_scores_in_index_order():
    values = np.array([0.9, 0.95, 0.85, 0.95, 0.99])
    assert cap_selection(values, [0, 1, 2, 3, 4], 3) == [1, 3, 4]
    assert cap_selection(values, [0, 2], None) == [0, 2]


def test_decision_reduction_factor():
    values = [0.1] * 40
    values[3] = values[4] = 0.9
    decision = decide(_series(values), 0.8, 8)
    assert decision.indices == [3, 4]
    assert decision.reduction_factor == 20.0
