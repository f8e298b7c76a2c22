import logging
from typing import Set, Tuple

import numpy as np

from config import PipelineConfig
from errors import EmptyGlanceSet, GlanceOutOfRange, LengthMismatch
from models import GlanceSet, PseudoLabelSeries, ScoreSeries

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def mine_pseudo_snippets(scores: ScoreSeries, glances: GlanceSet, alpha: float) -> Set[int]:
    """Grow every glance into the run of snippets scoring above alpha times the glance score.

    Each walk stops at the first snippet failing the strict test, and never
    reaches the neighbouring glance (exclusive); the first and last glances
    walk to the sequence ends instead. The glance itself is always kept.
    """
    if not glances.glances:
        raise EmptyGlanceSet(f"{glances.video_id} has no glances to mine from")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    values = scores.scores
    count = len(values)
    points = glances.glances
    if points[-1] >= count:
        raise GlanceOutOfRange(f"glance {points[-1]} outside score series of length {count}")

    mined: Set[int] = set()
    for i, g in enumerate(points):
        threshold = alpha * values[g]
        left_stop = points[i - 1] if i > 0 else -1
        right_stop = points[i + 1] if i + 1 < len(points) else count
        mined.add(g)

        t = g - 1
        while t > left_stop and values[t] > threshold:
            mined.add(t)
            t -= 1
        t = g + 1
        while t < right_stop and values[t] > threshold:
            mined.add(t)
            t += 1
    return mined


def splat_sigma(snippet_count: int, r: float, mode: str = "relative") -> float:
    return r * snippet_count if mode == "relative" else r


def gaussian_splat(
    mined: Set[int],
    snippet_count: int,
    r: float,
    video_id: str = "",
    sigma_mode: str = "relative",
) -> PseudoLabelSeries:
    if r <= 0:
        raise ValueError(f"smoothing ratio must be positive, got {r}")
    support = tuple(sorted(mined))
    if support and (support[0] < 0 or support[-1] >= snippet_count):
        raise GlanceOutOfRange(f"mined index outside [0, {snippet_count})")
    if not support:
        return PseudoLabelSeries(video_id=video_id, values=np.zeros(snippet_count), support=())

    sigma = splat_sigma(snippet_count, r, sigma_mode)
    t = np.arange(snippet_count, dtype=np.float64)[:, None]
    centers = np.asarray(support, dtype=np.float64)[None, :]
    total = np.exp(-((t - centers) ** 2) / (2.0 * sigma ** 2)).sum(axis=1)
    values = total / total.max()
    return PseudoLabelSeries(video_id=video_id, values=np.clip(values, 0.0, 1.0), support=support)


def abnormal_loss(predicted: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to `predicted`.

    Predictions are clamped into [eps, 1 - eps]; clamped entries get zero gradient.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise LengthMismatch(f"predicted length {predicted.shape} differs from target {target.shape}")
    clamped = np.clip(predicted, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(target * np.log(clamped) + (1.0 - target) * np.log(1.0 - clamped))
    n = max(predicted.size, 1)
    grad = (-target / clamped + (1.0 - target) / (1.0 - clamped)) / n
    grad = np.where((predicted > BCE_EPS) & (predicted < 1.0 - BCE_EPS), grad, 0.0)
    return float(losses.mean()) if predicted.size else 0.0, grad


def init_pseudo_labels(glances: GlanceSet, snippet_count: int, r: float, sigma_mode: str = "relative") -> PseudoLabelSeries:
    glances.check_bounds(snippet_count)
    return gaussian_splat(set(glances.glances), snippet_count, r, glances.video_id, sigma_mode)


def update_pseudo_labels(scores: ScoreSeries, glances: GlanceSet, cfg: PipelineConfig) -> PseudoLabelSeries:
    count = len(scores)
    if not glances.glances:
        return gaussian_splat(set(), count, cfg.smoothing_ratio, glances.video_id, cfg.sigma_mode)
    mined = mine_pseudo_snippets(scores, glances, cfg.alpha)
    logger.debug(f"{glances.video_id}: {len(glances.glances)} glances grew into {len(mined)} pseudo snippets")
    return gaussian_splat(mined, count, cfg.smoothing_ratio, glances.video_id, cfg.sigma_mode)
