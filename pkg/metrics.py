"""Frame-level ranking metrics and the comparison harness helpers."""
import logging
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata

from errors import GlanceOutOfRange, LengthMismatch, SingleClass
from models import FeatureStream, GlanceSet, GroundTruth, ScoreSeries
from scorer import ScorerModel, score_streams

logger = logging.getLogger(__name__)

GLANCE_SHIFT_SWEEP = (0, 10, 50, 100)


def _prepare(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int8)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    s, y = _prepare(scores, labels)
    positives = int(y.sum())
    negatives = y.size - positives
    if positives == 0 or negatives == 0:
        raise SingleClass(f"ROC AUC needs both classes ({positives} positives, {negatives} negatives)")
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)


def _descending_order(s: np.ndarray) -> np.ndarray:
    # score descending, original index ascending on ties
    return np.lexsort((np.arange(s.size), -s))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise AP: mean over positives of the precision at their rank."""
    s, y = _prepare(scores, labels)
    positives = int(y.sum())
    if positives == 0:
        raise SingleClass("average precision needs at least one positive")
    ranked = y[_descending_order(s)]
    hits = np.cumsum(ranked)
    precision_at = hits / np.arange(1, ranked.size + 1)
    return float(precision_at[ranked == 1].sum() / positives)


def roc_curve_points(scores, labels) -> List[Dict[str, float]]:
    s, y = _prepare(scores, labels)
    order = _descending_order(s)
    s, y = s[order], y[order]
    positives, negatives = max(int(y.sum()), 1), max(int(y.size - y.sum()), 1)
    # one point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    points = [{"fpr": 0.0, "tpr": 0.0, "threshold": float("inf")}]
    points += [
        {"fpr": float(f / negatives), "tpr": float(t / positives), "threshold": float(s[i])}
        for f, t, i in zip(fp, tp, last)
    ]
    return points


def pr_curve_points(scores, labels) -> List[Dict[str, float]]:
    s, y = _prepare(scores, labels)
    order = _descending_order(s)
    s, y = s[order], y[order]
    positives = max(int(y.sum()), 1)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    return [
        {"recall": float(t / positives), "precision": float(t / (i + 1)), "threshold": float(s[i])}
        for t, i in zip(tp, last)
    ]


class VideoMetrics(BaseModel):
    video_id: str
    frames: int
    anomalous_frames: int
    auc: float | None
    ap: float | None


class EvaluationReport(BaseModel):
    auc: float
    ap: float
    frames: int
    videos: int
    per_video: List[VideoMetrics]


def _safe(metric: Callable, scores, labels):
    try:
        return metric(scores, labels)
    except SingleClass:
        return None


def frame_level(series: List[ScoreSeries], truths: List[GroundTruth]) -> Tuple[np.ndarray, np.ndarray, List[VideoMetrics]]:
    """Concatenated frame scores/labels; snippet scores are repeated over snippet_stride frames."""
    if not series:
        raise SingleClass("no score series to evaluate")
    by_id = {t.video_id: t for t in truths}
    all_scores, all_labels, per_video = [], [], []
    for s in series:
        truth = by_id.get(s.video_id, GroundTruth(video_id=s.video_id))
        frame_scores = np.repeat(s.scores, truth.snippet_stride)
        frame_labels = truth.frame_labels(len(s))
        all_scores.append(frame_scores)
        all_labels.append(frame_labels)
        per_video.append(VideoMetrics(
            video_id=s.video_id,
            frames=int(frame_labels.size),
            anomalous_frames=int(frame_labels.sum()),
            auc=_safe(roc_auc, frame_scores, frame_labels),
            ap=_safe(average_precision, frame_scores, frame_labels),
        ))
    return np.concatenate(all_scores), np.concatenate(all_labels), per_video


def evaluate_scores(series: List[ScoreSeries], truths: List[GroundTruth]) -> EvaluationReport:
    """Metrics on the concatenation of all frames, not the mean of per-video metrics."""
    scores, labels, per_video = frame_level(series, truths)
    return EvaluationReport(
        auc=roc_auc(scores, labels),
        ap=average_precision(scores, labels),
        frames=int(labels.size),
        videos=len(series),
        per_video=per_video,
    )


def evaluate_dataset(model: ScorerModel, streams: List[FeatureStream], truths: List[GroundTruth]) -> EvaluationReport:
    report = evaluate_scores(score_streams(model, streams), truths)
    logger.info(f"Evaluated {report.videos} videos / {report.frames} frames: AUC {report.auc:.4f}, AP {report.ap:.4f}")
    return report


def uniform_baseline(
    streams: List[FeatureStream],
    clip_len: int,
    oracle: Callable[[FeatureStream, int, int], bool],
) -> List[ScoreSeries]:
    """Non-overlapping clips of clip_len snippets; a "yes" from the oracle sets the whole clip to 1."""
    if clip_len < 1:
        raise ValueError("clip_len must be positive")
    result = []
    for stream in streams:
        values = np.zeros(stream.snippet_count)
        for start in range(0, stream.snippet_count, clip_len):
            end = min(start + clip_len, stream.snippet_count) - 1
            if oracle(stream, start, end):
                values[start:end + 1] = 1.0
        result.append(ScoreSeries(video_id=stream.video_id, scores=values))
    return result


def perturb_glances(glances: GlanceSet, shift: int, rng: np.random.Generator, snippet_count: int) -> GlanceSet:
    """Move each glance by a uniform offset in [-shift, +shift], clip to [0, T), re-sort and de-duplicate."""
    if shift < 0:
        raise ValueError("shift must be non-negative")
    glances.check_bounds(snippet_count)
    if shift == 0 or not glances.glances:
        return glances
    points = np.asarray(glances.glances)
    moved = np.clip(points + rng.integers(-shift, shift + 1, size=points.size), 0, snippet_count - 1)
    return glances.model_copy(update={"glances": tuple(sorted(set(moved.tolist())))})


def coverage(selected: Sequence[int], snippet_labels: np.ndarray) -> float | None:
    """Share of ground-truth anomalous snippets that the selection contains."""
    anomalous = np.flatnonzero(snippet_labels)
    if anomalous.size == 0:
        return None
    if len(selected) and (min(selected) < 0 or max(selected) >= len(snippet_labels)):
        raise GlanceOutOfRange("selection index outside the video")
    return float(np.isin(anomalous, np.asarray(selected, dtype=int)).mean())
