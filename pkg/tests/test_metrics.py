import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from errors import GlanceOutOfRange, LengthMismatch, SingleClass
from metrics import (
    GLANCE_SHIFT_SWEEP,
    average_precision,
    coverage,
    evaluate_dataset,
    evaluate_scores,
    frame_level,
    perturb_glances,
    pr_curve_points,
    roc_auc,
    roc_curve_points,
    uniform_baseline,
)
from models import FeatureStream, GlanceSet, GroundTruth, ScoreSeries
from scorer import init_model, score_streams


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def _enumerated_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    return total / hits


def _instances(count, seed=0):
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < count:
        n = int(rng.integers(2, 201))
        labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
        if labels.min() == labels.max():
            continue
        # coarse scores half of the time so ties occur
        scores = np.round(rng.random(n), 1) if rng.random() < 0.5 else rng.random(n)
        produced += 1
        yield scores, labels


def test_auc_small_cases():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_matches_pairwise_oracle():
    for scores, labels in _instances(500):
        assert abs(roc_auc(scores, labels) - _pairwise_auc(scores.tolist(), labels.tolist())) < 1e-9


def test_auc_agrees_with_sklearn():
    for scores, labels in _instances(50, seed=1):
        assert roc_auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_ap_small_cases():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(0.25)


def test_ap_matches_rank_enumeration():
    for scores, labels in _instances(500, seed=2):
        assert abs(average_precision(scores, labels) - _enumerated_ap(scores.tolist(), labels.tolist())) < 1e-9


def test_ap_agrees_with_sklearn_without_ties():
    rng = np.random.default_rng(3)
    for _ in range(50):
        labels = np.r_[1, 0, (rng.random(60) < 0.3).astype(int)]
        scores = rng.random(labels.size)
        assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


def test_ties_broken_by_original_index():
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5


def test_metric_errors():
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(SingleClass):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(LengthMismatch):
        roc_auc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(LengthMismatch):
        average_precision([0.1], [0, 1])


def test_invariances():
    for scores, labels in _instances(100, seed=4):
        stretched = np.exp(3.0 * scores) + 1.0
        assert roc_auc(stretched, labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)
        assert average_precision(stretched, labels) == pytest.approx(average_precision(scores, labels), abs=1e-12)
        assert roc_auc(-scores, 1 - labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)


def test_ap_is_one_iff_positives_lead():
    for scores, labels in _instances(200, seed=5):
        ranked = labels[np.lexsort((np.arange(scores.size), -scores))]
        separated = not np.any(np.diff(ranked) > 0)
        assert (average_precision(scores, labels) == pytest.approx(1.0, abs=1e-12)) == separated


def test_curve_points():
    scores, labels = [0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0]
    roc = [(p["fpr"], p["tpr"]) for p in roc_curve_points(scores, labels)]
    assert roc == [(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]
    pr = [(p["recall"], p["precision"]) for p in pr_curve_points(scores, labels)]
    assert pr == [(0.5, 1.0), (1.0, pytest.approx(2 / 3)), (1.0, 0.5)]


def test_snippets_expand_to_frames():
    series = [ScoreSeries(video_id="v", scores=[0.2, 0.9])]
    truths = [GroundTruth(video_id="v", snippet_stride=4, intervals=((4, 6),))]
    scores, labels, per_video = frame_level(series, truths)
    assert scores.tolist() == [0.2] * 4 + [0.9] * 4
    assert labels.tolist() == [0, 0, 0, 0, 1, 1, 0, 0]
    assert per_video[0].anomalous_frames == 2
    assert per_video[0].auc == pytest.approx(10 / 12)


def test_dataset_metric_uses_concatenation():
    series = [ScoreSeries(video_id="a", scores=[0.9, 0.8]), ScoreSeries(video_id="b", scores=[0.3, 0.2])]
    truths = [GroundTruth(video_id=v, snippet_stride=1, intervals=((0, 1),)) for v in ("a", "b")]
    report = evaluate_scores(series, truths)
    assert [v.auc for v in report.per_video] == [1.0, 1.0]
    assert report.auc == pytest.approx(0.75)
    assert report.ap == pytest.approx((1 + 2 / 3) / 2)
    assert report.frames == 4 and report.videos == 2


def test_normal_video_has_no_per_video_auc():
    series = [ScoreSeries(video_id="a", scores=[0.9, 0.1]), ScoreSeries(video_id="n", scores=[0.2, 0.3])]
    truths = [GroundTruth(video_id="a", snippet_stride=1, intervals=((0, 1),))]
    report = evaluate_scores(series, truths)
    assert report.per_video[1].auc is None and report.per_video[1].ap is None
    assert report.auc == 1.0


def test_evaluating_no_series_is_single_class():
    with pytest.raises(SingleClass):
        evaluate_scores([], [])


def test_evaluate_dataset_scores_then_concatenates(small_cfg, rng):
    model = init_model(4, small_cfg)
    streams = [FeatureStream(video_id=f"v{i}", features=rng.normal(size=(8, 4))) for i in range(3)]
    truths = [GroundTruth(video_id=f"v{i}", snippet_stride=2, intervals=((2, 7),) if i == 0 else ()) for i in range(3)]
    direct = evaluate_scores(score_streams(model, streams), truths)
    assert evaluate_dataset(model, streams, truths) == direct
    assert direct.frames == 48


def test_uniform_baseline_fills_whole_clips():
    stream = FeatureStream(video_id="v", features=np.zeros((10, 2)))
    seen = []

    def oracle(s, start, end):
        seen.append((start, end))
        return start == 4

    series = uniform_baseline([stream], 4, oracle)
    assert seen == [(0, 3), (4, 7), (8, 9)]
    assert series[0].scores.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 0, 0]
    with pytest.raises(ValueError):
        uniform_baseline([stream], 0, oracle)


def test_perturb_zero_shift_is_identity(rng):
    glances = GlanceSet(video_id="v", anomaly_class="Riot", glances=(3, 9, 40))
    assert perturb_glances(glances, 0, rng, 50) == glances
    assert GLANCE_SHIFT_SWEEP == (0, 10, 50, 100)


def test_perturb_stays_in_range():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        t = int(rng.integers(1, 120))
        points = tuple(sorted(rng.choice(t, size=int(rng.integers(1, min(5, t) + 1)), replace=False).tolist()))
        shift = int(rng.choice(GLANCE_SHIFT_SWEEP[1:]))
        moved = perturb_glances(GlanceSet(video_id="v", anomaly_class="Riot", glances=points), shift, rng, t)
        assert moved.glances
        assert all(0 <= g < t for g in moved.glances)
        assert list(moved.glances) == sorted(set(moved.glances))
        assert all(min(abs(g - p) for p in points) <= shift for g in moved.glances)


def test_perturb_rejects_out_of_range_input(rng):
    with pytest.raises(GlanceOutOfRange):
        perturb_glances(GlanceSet(video_id="v", anomaly_class="Riot", glances=(12,)), 5, rng, 10)


def test_coverage():
    assert coverage([1, 2], np.array([0, 1, 1, 1])) == pytest.approx(2 / 3)
    assert coverage([], np.array([0, 1])) == 0.0
    assert coverage([0], np.zeros(3)) is None
    with pytest.raises(GlanceOutOfRange):
        coverage([5], np.array([0, 1]))
