from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from models import ScoreSeries


class Verdict(str, Enum):
    ANOMALOUS = "Anomalous"
    NORMAL_FALLBACK = "NormalFallback"


class SamplingDecision(BaseModel):
    video_id: str
    verdict: Verdict
    indices: List[int]
    snippet_count: int

    @property
    def reduction_factor(self) -> float:
        return self.snippet_count / len(self.indices) if self.indices else float("inf")


def select_frames(scores: ScoreSeries | np.ndarray, theta: float) -> List[int]:
    """Indices whose score is strictly above theta, ascending."""
    values = scores.scores if isinstance(scores, ScoreSeries) else np.asarray(scores, dtype=np.float64)
    return np.flatnonzero(values > theta).tolist()


def uniform_indices(snippet_count: int, m: int) -> List[int]:
    """m evenly spaced indices over [0, T); fewer when the video is shorter than m."""
    if snippet_count <= m:
        return list(range(snippet_count))
    return [(i * snippet_count) // m for i in range(m)]


def cap_selection(values: np.ndarray, indices: List[int], max_frames: Optional[int]) -> List[int]:
    """Keep the max_frames highest-scoring indices (earlier index wins ties), returned ascending."""
    if max_frames is None or len(indices) <= max_frames:
        return indices
    chosen = np.asarray(indices)
    order = np.lexsort((chosen, -values[chosen]))[:max_frames]
    return sorted(chosen[order].tolist())


def sample_for_downstream(
    scores: ScoreSeries,
    theta: float,
    m: int,
    max_frames: Optional[int] = None,
) -> Tuple[List[int], Verdict]:
    selected = select_frames(scores, theta)
    if selected:
        return cap_selection(scores.scores, selected, max_frames), Verdict.ANOMALOUS
    return uniform_indices(len(scores), m), Verdict.NORMAL_FALLBACK


def decide(scores: ScoreSeries, theta: float, m: int, max_frames: Optional[int] = None) -> SamplingDecision:
    indices, verdict = sample_for_downstream(scores, theta, m, max_frames)
    return SamplingDecision(video_id=scores.video_id, verdict=verdict, indices=indices, snippet_count=len(scores))
