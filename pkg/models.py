from enum import Enum
from typing import Annotated, List, Literal, Optional, Tuple

import numpy as np
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import GlanceOutOfRange, NonFiniteValue, SchemaViolation

DEFAULT_SNIPPET_STRIDE = 16
VIDEO_PLACEHOLDER = "<video>\n"


class AnomalyClass(str, Enum):
    NORMAL = "Normal"
    ABUSE = "Abuse"
    EXPLOSION = "Explosion"
    FIGHTING = "Fighting"
    SHOOTING = "Shooting"
    CAR_ACCIDENT = "CarAccident"
    RIOT = "Riot"


# On-disk class codes. Anything outside the known set is stored as OTHER_CODE.
CLASS_CODES = {cls.value: code for code, cls in enumerate(AnomalyClass)}
OTHER_CODE = len(CLASS_CODES)


def is_normal(label: str) -> bool:
    return label == AnomalyClass.NORMAL.value


def class_code(label: str) -> int:
    return CLASS_CODES.get(label, OTHER_CODE)


def label_from_code(code: int, other_name: Optional[str] = None) -> str:
    for name, known in CLASS_CODES.items():
        if known == code:
            return name
    if code == OTHER_CODE and other_name:
        return other_name
    raise SchemaViolation(f"unknown class code {code}")


def _check_label(value: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise ValueError("class label must be a nonempty string")
    return value


Label = Annotated[str, AfterValidator(_check_label)]


def _readonly(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class ArrayModel(BaseModel):
    """Frozen model holding numpy arrays; equality compares arrays element-wise."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        for name in type(self).model_fields:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


class FeatureStream(ArrayModel):
    video_id: str
    features: np.ndarray
    snippet_stride: int = Field(DEFAULT_SNIPPET_STRIDE, ge=1)
    anomaly_class: Label = AnomalyClass.NORMAL.value

    @field_validator("features", mode="before")
    @classmethod
    def _coerce_features(cls, value):
        arr = _readonly(value, 2, "features")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"features must be at least 1x1, got shape {arr.shape}")
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            row, col = (int(v) for v in bad[0])
            raise NonFiniteValue(f"non-finite feature at snippet {row}, dim {col}")
        return arr

    @property
    def snippet_count(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def is_anomalous(self) -> bool:
        return not is_normal(self.anomaly_class)


class GlanceSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    video_id: str
    anomaly_class: Label
    glances: Tuple[int, ...] = ()

    @model_validator(mode="after")
    def _check_glances(self):
        if any(g < 0 for g in self.glances):
            raise ValueError("glance indices must be non-negative")
        if any(b <= a for a, b in zip(self.glances, self.glances[1:])):
            raise ValueError("glance indices must be strictly increasing")
        if is_normal(self.anomaly_class) and self.glances:
            raise ValueError("a Normal video carries no glances")
        if not is_normal(self.anomaly_class) and not self.glances:
            raise ValueError(f"an anomalous video ({self.anomaly_class}) needs at least one glance")
        return self

    def check_bounds(self, snippet_count: int) -> None:
        for g in self.glances:
            if g >= snippet_count:
                raise GlanceOutOfRange(
                    f"glance {g} of {self.video_id} outside [0, {snippet_count})"
                )


def frames_to_snippets(frames: List[int], stride: int = DEFAULT_SNIPPET_STRIDE) -> Tuple[int, ...]:
    """Map raw frame indices to snippet indices (floor division), sorted and de-duplicated."""
    if stride < 1:
        raise ValueError("stride must be positive")
    return tuple(sorted({int(f) // stride for f in frames}))


class ScoreSeries(ArrayModel):
    video_id: str
    scores: np.ndarray

    @field_validator("scores", mode="before")
    @classmethod
    def _coerce_scores(cls, value):
        arr = _readonly(value, 1, "scores")
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("scores must lie in the closed unit interval")
        return arr

    def __len__(self) -> int:
        return int(self.scores.shape[0])


class PseudoLabelSeries(ArrayModel):
    video_id: str
    values: np.ndarray
    support: Tuple[int, ...] = ()

    @field_validator("values", mode="before")
    @classmethod
    def _coerce_values(cls, value):
        arr = _readonly(value, 1, "values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("pseudo labels must lie in the closed unit interval")
        return arr

    def as_scores(self) -> ScoreSeries:
        return ScoreSeries(video_id=self.video_id, scores=self.values)


class EventProposal(BaseModel):
    model_config = ConfigDict(frozen=True)

    video_id: str
    start: int = Field(ge=0)
    end: int = Field(ge=0)
    label: Label
    source_glance: Optional[int] = None

    @model_validator(mode="after")
    def _check_span(self):
        if self.end < self.start:
            raise ValueError(f"proposal end {self.end} before start {self.start}")
        if self.source_glance is not None and not self.start <= self.source_glance <= self.end:
            raise ValueError("source glance must lie inside the proposal")
        return self

    def check_bounds(self, snippet_count: int) -> None:
        if self.end >= snippet_count:
            raise GlanceOutOfRange(f"proposal [{self.start}, {self.end}] outside [0, {snippet_count})")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


class CaptionedClip(BaseModel):
    model_config = ConfigDict(frozen=True)

    proposal: EventProposal
    caption: str = Field(min_length=1)
    caption_source: Literal["client", "imported"] = "client"

    @field_validator("caption")
    @classmethod
    def _nonblank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("caption must not be blank")
        return value


class Provenance(BaseModel):
    model_config = ConfigDict(frozen=True)

    template_id: str
    model_name: str
    filtered: bool = False
    filter_reasons: Tuple[str, ...] = ()


class InstructionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    video_id: str
    clip_span: Tuple[int, int]
    label: Label
    user: str = Field(min_length=1)
    assistant: str = Field(min_length=1)
    provenance: Provenance

    @model_validator(mode="after")
    def _check_record(self):
        if VIDEO_PLACEHOLDER not in self.user:
            raise ValueError("user turn must contain the video placeholder")
        if not self.assistant.strip():
            raise ValueError("assistant turn must not be blank")
        return self


class GroundTruth(BaseModel):
    """Anomalous frame intervals of one video, half-open [start, end) in frames."""

    model_config = ConfigDict(frozen=True)

    video_id: str
    snippet_stride: int = Field(DEFAULT_SNIPPET_STRIDE, ge=1)
    intervals: Tuple[Tuple[int, int], ...] = ()

    @field_validator("intervals")
    @classmethod
    def _check_intervals(cls, value):
        for start, end in value:
            if start < 0 or end <= start:
                raise ValueError(f"interval [{start}, {end}) is empty or negative")
        return value

    def frame_labels(self, snippet_count: int) -> np.ndarray:
        labels = np.zeros(snippet_count * self.snippet_stride, dtype=np.int8)
        for start, end in self.intervals:
            labels[start:end] = 1
        return labels

    def snippet_labels(self, snippet_count: int) -> np.ndarray:
        """A snippet counts as anomalous when any of its frames is."""
        frames = self.frame_labels(snippet_count)
        return frames.reshape(snippet_count, self.snippet_stride).max(axis=1)
