import math
import time

import numpy as np
import pytest

from config import PipelineConfig
from errors import EmptyGlanceSet, GlanceOutOfRange, LengthMismatch
from models import GlanceSet, ScoreSeries
from pseudo_label import (
    abnormal_loss,
    gaussian_splat,
    init_pseudo_labels,
    mine_pseudo_snippets,
    update_pseudo_labels,
)


def _series(values):
    return ScoreSeries(video_id="v", scores=values)


def _glances(points):
    return GlanceSet(video_id="v", anomaly_class="Fighting", glances=tuple(points))


def _oracle(scores, glances, alpha):
    """Independent enumeration: per glance and direction, the longest prefix passing the strict test."""
    result = set()
    for i, g in enumerate(glances):
        threshold = alpha * scores[g]
        result.add(g)
        lower = glances[i - 1] + 1 if i > 0 else 0
        upper = glances[i + 1] - 1 if i + 1 < len(glances) else len(scores) - 1
        left = [t for t in range(lower, g)]
        best = 0
        for n in range(1, len(left) + 1):
            if all(scores[t] > threshold for t in left[-n:]):
                best = n
        result.update(left[len(left) - best:])
        right = [t for t in range(g + 1, upper + 1)]
        best = 0
        for n in range(1, len(right) + 1):
            if all(scores[t] > threshold for t in right[:n]):
                best = n
        result.update(right[:best])
    return result


def _random_instances(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        t = int(rng.integers(1, 65))
        n = int(rng.integers(1, min(5, t) + 1))
        points = sorted(rng.choice(t, size=n, replace=False).tolist())
        # coarse values so ties and near-threshold cases occur
        scores = np.round(rng.random(t), 1) if rng.random() < 0.5 else rng.random(t)
        yield scores, points, float(rng.uniform(0.05, 1.0))


def test_worked_example():
    assert mine_pseudo_snippets(_series([0.2, 0.85, 0.95, 0.90, 0.3]), _glances([2]), 0.9) == {2, 3}


def test_flat_scores_with_alpha_one_give_singleton():
    assert mine_pseudo_snippets(_series([0.5] * 7), _glances([3]), 1.0) == {3}


def test_matches_brute_force_oracle():
    elapsed, count = 0.0, 0
    for scores, points, alpha in _random_instances(1200):
        series, glances = _series(scores), _glances(points)
        started = time.perf_counter()
        mined = mine_pseudo_snippets(series, glances, alpha)
        elapsed += time.perf_counter() - started
        assert mined == _oracle(scores, points, alpha)
        count += 1
    assert count >= 1000
    assert elapsed < 1.0


def test_higher_alpha_mines_a_subset():
    for scores, points, alpha in _random_instances(300, seed=1):
        tighter = min(1.0, alpha + 0.2)
        assert mine_pseudo_snippets(_series(scores), _glances(points), tighter) <= \
            mine_pseudo_snippets(_series(scores), _glances(points), alpha)


def test_intervals_contiguous_and_stay_between_neighbours():
    for scores, points, alpha in _random_instances(300, seed=2):
        mined = mine_pseudo_snippets(_series(scores), _glances(points), alpha)
        assert set(points) <= mined
        for i, g in enumerate(points):
            lower = points[i - 1] if i > 0 else -1
            upper = points[i + 1] if i + 1 < len(points) else len(scores)
            run = {g}
            t = g - 1
            while t > lower and t in mined:
                run.add(t)
                t -= 1
            t = g + 1
            while t < upper and t in mined:
                run.add(t)
                t += 1
            assert run == set(range(min(run), max(run) + 1))


def test_zero_score_glance_is_still_kept():
    assert 1 in mine_pseudo_snippets(_series([0.3, 0.0, 0.4]), _glances([1]), 0.9)


def test_mining_errors():
    with pytest.raises(EmptyGlanceSet):
        mine_pseudo_snippets(_series([0.1]), GlanceSet(video_id="v", anomaly_class="Normal"), 0.9)
    with pytest.raises(GlanceOutOfRange):
        mine_pseudo_snippets(_series([0.1, 0.2]), _glances([5]), 0.9)


def test_single_peak_is_one_and_symmetric():
    out = gaussian_splat({10}, 21, 0.1).values
    assert out[10] == 1.0
    np.testing.assert_allclose(out[:10], out[11:][::-1], atol=1e-15)
    assert np.all(np.diff(out[10:]) < 0)


def test_empty_support_is_all_zero():
    series = gaussian_splat(set(), 8, 0.1)
    assert series.values.tolist() == [0.0] * 8
    assert series.support == ()


def test_two_term_formula():
    out = gaussian_splat({10, 12}, 32, 0.1).values
    sigma = 0.1 * 32

    def raw(t):
        return sum(math.exp(-((t - c) ** 2) / (2 * sigma ** 2)) for c in (10, 12))

    peak = max(raw(t) for t in range(32))
    for t in (10, 11, 12):
        assert abs(out[t] - raw(t) / peak) < 1e-9


def test_absolute_sigma_mode():
    values = gaussian_splat({5}, 50, 2.0, sigma_mode="absolute").values
    assert values[7] == pytest.approx(math.exp(-4 / 8))


def test_splat_bounds_and_translation():
    rng = np.random.default_rng(3)
    for _ in range(100):
        t = 64
        mined = set(rng.choice(np.arange(20, 40), size=int(rng.integers(1, 5)), replace=False).tolist())
        shift = int(rng.integers(1, 5))
        base = gaussian_splat(mined, t, 0.02).values
        moved = gaussian_splat({m + shift for m in mined}, t, 0.02).values
        assert base.min() >= 0.0 and base.max() == pytest.approx(1.0)
        np.testing.assert_allclose(moved[shift:], base[:-shift], atol=1e-12)


def test_loss_zero_at_matched_hard_labels():
    loss, grad = abnormal_loss(np.zeros(5), np.zeros(5))
    assert loss < 1e-5
    assert np.all(grad == 0.0)


def test_gradient_vanishes_at_soft_target():
    target = np.array([0.2, 0.5, 0.7, 0.9])
    _, grad = abnormal_loss(target.copy(), target)
    assert np.all(np.abs(grad) < 1e-9)


def test_loss_matches_finite_differences():
    rng = np.random.default_rng(11)
    step = 1e-6
    for _ in range(100):
        n = int(rng.integers(1, 20))
        predicted = rng.uniform(0.05, 0.95, size=n)
        target = rng.random(n)
        loss, grad = abnormal_loss(predicted, target)
        assert loss >= 0
        for i in range(n):
            up, down = predicted.copy(), predicted.copy()
            up[i] += step
            down[i] -= step
            numeric = (abnormal_loss(up, target)[0] - abnormal_loss(down, target)[0]) / (2 * step)
            assert abs(numeric - grad[i]) <= 1e-4 * max(abs(numeric), abs(grad[i]), 1e-4)


def test_loss_length_mismatch():
    with pytest.raises(LengthMismatch):
        abnormal_loss(np.zeros(3), np.zeros(4))


def test_init_and_update_labels():
    glances = _glances([2, 7])
    init = init_pseudo_labels(glances, 10, 0.1)
    assert init.support == (2, 7)
    cfg = PipelineConfig()
    scores = _series([0.1, 0.9, 0.95, 0.2, 0.1, 0.1, 0.8, 0.9, 0.85, 0.1])
    updated = update_pseudo_labels(scores, glances, cfg)
    assert updated.support == (1, 2, 7, 8)
    assert updated == update_pseudo_labels(scores, glances, cfg)
