"""On-disk formats shared by every stage.

Feature file layout (all little-endian)::

    b"HVADFT01"                       8-byte magic
    u32 T, u32 D, u32 snippet_stride, u32 class-code
    T*D f32, row-major
    u32 n + n bytes UTF-8 video_id
    [u32 n + n bytes UTF-8 class name]   only when class-code is the Other code
"""
import json
import re
import logging
import struct
from collections import Counter
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from errors import IoFailure, MagicMismatch, NonFiniteValue, SchemaViolation, TruncatedPayload
from models import (
    OTHER_CODE,
    FeatureStream,
    GlanceSet,
    GroundTruth,
    ScoreSeries,
    class_code,
    is_normal,
    label_from_code,
)

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"HVADFT01"
FEATURE_SUFFIX = ".hvft"
_HEADER = struct.Struct("<4I")
_U32 = struct.Struct("<I")
PAYLOAD_OFFSET = len(FEATURE_MAGIC) + _HEADER.size
SCORE_COLUMNS = ["video_id", "index", "value"]
_PARSER_LINE = re.compile(r"line (\d+)")
REFERENCE_GLANCES_PER_VIDEO = 2.35


def _write_bytes(path: Path, payload: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(payload)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


# ======================
#  FEATURE STREAMS
# ======================

def encode_feature_stream(stream: FeatureStream) -> bytes:
    payload = np.asarray(stream.features, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise NonFiniteValue(
            f"feature value not representable as finite f32 in {stream.video_id}",
            offset=PAYLOAD_OFFSET + 4 * int(bad[0]),
        )
    code = class_code(stream.anomaly_class)
    parts = [
        FEATURE_MAGIC,
        _HEADER.pack(stream.snippet_count, stream.feature_dim, stream.snippet_stride, code),
        payload.tobytes(order="C"),
    ]
    for text in [stream.video_id] + ([stream.anomaly_class] if code == OTHER_CODE else []):
        raw = text.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
    return b"".join(parts)


def _read_string(data: bytes, offset: int, what: str) -> tuple[str, int]:
    if offset + _U32.size > len(data):
        raise TruncatedPayload(f"missing {what} length prefix", offset=offset)
    (length,) = _U32.unpack_from(data, offset)
    offset += _U32.size
    if offset + length > len(data):
        raise TruncatedPayload(f"{what} declares {length} bytes, {len(data) - offset} present", offset=offset)
    try:
        return data[offset:offset + length].decode("utf-8"), offset + length
    except UnicodeDecodeError as e:
        raise SchemaViolation(f"{what} is not valid UTF-8 at byte offset {offset}") from e


def decode_feature_stream(data: bytes) -> FeatureStream:
    if data[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise MagicMismatch(f"expected magic {FEATURE_MAGIC!r}, found {data[:len(FEATURE_MAGIC)]!r}", offset=0)
    if len(data) < PAYLOAD_OFFSET:
        raise TruncatedPayload("header shorter than 16 bytes", offset=len(FEATURE_MAGIC))
    snippets, dims, stride, code = _HEADER.unpack_from(data, len(FEATURE_MAGIC))
    if snippets < 1 or dims < 1 or stride < 1:
        raise SchemaViolation(f"header declares T={snippets}, D={dims}, stride={stride}; all must be >= 1")

    payload_end = PAYLOAD_OFFSET + 4 * snippets * dims
    if payload_end > len(data):
        raise TruncatedPayload(
            f"payload declares {snippets}x{dims} f32 values, {(len(data) - PAYLOAD_OFFSET) // 4} present",
            offset=len(data),
        )
    values = np.frombuffer(data, dtype="<f4", count=snippets * dims, offset=PAYLOAD_OFFSET)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteValue("non-finite feature value", offset=PAYLOAD_OFFSET + 4 * int(bad[0]))

    video_id, offset = _read_string(data, payload_end, "video_id")
    other_name = None
    if code == OTHER_CODE:
        other_name, offset = _read_string(data, offset, "class name")
    if offset != len(data):
        raise SchemaViolation(f"{len(data) - offset} trailing bytes after record at byte offset {offset}")

    return FeatureStream(
        video_id=video_id,
        features=values.reshape(snippets, dims),
        snippet_stride=stride,
        anomaly_class=label_from_code(code, other_name),
    )


def write_feature_stream(stream: FeatureStream, path: str | Path) -> None:
    payload = encode_feature_stream(stream)
    _write_bytes(Path(path), payload)
    logger.debug(f"Wrote {stream.video_id} ({stream.snippet_count}x{stream.feature_dim}) to {path}")


def read_feature_stream(path: str | Path) -> FeatureStream:
    return decode_feature_stream(_read_bytes(Path(path)))


def read_feature_dir(directory: str | Path) -> List[FeatureStream]:
    """All feature files of a directory, in file-name order."""
    files = sorted(Path(directory).glob(f"*{FEATURE_SUFFIX}"))
    if not files:
        raise IoFailure(f"no {FEATURE_SUFFIX} files under {directory}")
    streams = [read_feature_stream(p) for p in files]
    logger.info(f"Loaded {len(streams)} feature streams from {directory}")
    return streams


# ======================
#  JSON LINES
# ======================

def _read_lines(path: Path) -> Iterable[tuple[int, dict]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"invalid JSON: {e.msg}", line=lineno) from e
        if not isinstance(obj, dict):
            raise SchemaViolation("expected a JSON object", line=lineno)
        yield lineno, obj


def _write_lines(path: Path, rows: Iterable[dict]) -> None:
    body = "".join(json.dumps(row, ensure_ascii=False, separators=(", ", ": ")) + "\n" for row in rows)
    _write_bytes(Path(path), body.encode("utf-8"))


def _strict_keys(obj: dict, required: set, optional: set, lineno: int) -> None:
    missing = required - obj.keys()
    if missing:
        raise SchemaViolation(f"missing keys {sorted(missing)}", line=lineno)
    unknown = obj.keys() - required - optional
    if unknown:
        raise SchemaViolation(f"unknown keys {sorted(unknown)}", line=lineno)


def _validated(model: type[BaseModel], lineno: int, **fields):
    try:
        return model(**fields)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise SchemaViolation(f"{where + ': ' if where else ''}{first['msg']}", line=lineno) from e


def read_annotations(path: str | Path) -> List[GlanceSet]:
    result, seen = [], set()
    for lineno, obj in _read_lines(Path(path)):
        _strict_keys(obj, {"video_id", "class", "glances"}, set(), lineno)
        glances = obj["glances"]
        if not isinstance(glances, list) or not all(isinstance(g, int) and not isinstance(g, bool) for g in glances):
            raise SchemaViolation("glances must be a list of integers", line=lineno)
        glance_set = _validated(
            GlanceSet, lineno, video_id=obj["video_id"], anomaly_class=obj["class"], glances=tuple(glances)
        )
        if glance_set.video_id in seen:
            raise SchemaViolation(f"duplicate video_id {glance_set.video_id}", line=lineno)
        seen.add(glance_set.video_id)
        result.append(glance_set)
    logger.info(f"Read {len(result)} annotation records from {path}")
    return result


def write_annotations(glance_sets: Iterable[GlanceSet], path: str | Path) -> None:
    _write_lines(Path(path), (
        {"video_id": g.video_id, "class": g.anomaly_class, "glances": list(g.glances)}
        for g in glance_sets
    ))


def read_ground_truth(path: str | Path) -> List[GroundTruth]:
    result = []
    for lineno, obj in _read_lines(Path(path)):
        _strict_keys(obj, {"video_id", "intervals"}, {"snippet_stride"}, lineno)
        intervals = obj["intervals"]
        if not isinstance(intervals, list) or not all(
            isinstance(iv, list) and len(iv) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in iv)
            for iv in intervals
        ):
            raise SchemaViolation("intervals must be a list of [start, end] integer pairs", line=lineno)
        result.append(_validated(
            GroundTruth, lineno,
            video_id=obj["video_id"],
            snippet_stride=obj.get("snippet_stride", 16),
            intervals=tuple(tuple(iv) for iv in intervals),
        ))
    return result


def write_ground_truth(truths: Iterable[GroundTruth], path: str | Path) -> None:
    _write_lines(Path(path), (
        {"video_id": t.video_id, "snippet_stride": t.snippet_stride, "intervals": [list(iv) for iv in t.intervals]}
        for t in truths
    ))


# ======================
#  SCORE CSV
# ======================

def write_scores(series: Iterable[ScoreSeries], path: str | Path) -> None:
    """CSV `video_id,index,value`; values carry 9 significant digits."""
    rows = [
        (s.video_id, idx, float(v))
        for s in series
        for idx, v in enumerate(s.scores)
    ]
    frame = pd.DataFrame(rows, columns=SCORE_COLUMNS)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_scores(path: str | Path) -> List[ScoreSeries]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise SchemaViolation(f"malformed CSV: {e}", line=1) from e
    except pd.errors.ParserError as e:
        # the tokenizer reports "... in line N" with N counted from the header
        match = _PARSER_LINE.search(str(e))
        raise SchemaViolation(f"malformed CSV: {e}", line=int(match.group(1)) if match else 1) from e
    if list(frame.columns) != SCORE_COLUMNS:
        raise SchemaViolation(f"header must be {','.join(SCORE_COLUMNS)}", line=1)

    grouped: dict[str, list[float]] = {}
    for row_number, (video_id, index, value) in enumerate(frame.itertuples(index=False, name=None)):
        lineno = row_number + 2
        if not video_id:
            raise SchemaViolation("empty video_id", line=lineno)
        try:
            position, score = int(index), float(value)
        except ValueError as e:
            raise SchemaViolation(f"non-numeric index or value ({index!r}, {value!r})", line=lineno) from e
        values = grouped.setdefault(video_id, [])
        if position != len(values):
            raise SchemaViolation(
                f"index {position} for {video_id} out of order, expected {len(values)}", line=lineno
            )
        if not np.isfinite(score) or not 0.0 <= score <= 1.0:
            raise SchemaViolation(f"value {value} outside [0, 1]", line=lineno)
        values.append(score)
    return [ScoreSeries(video_id=vid, scores=vals) for vid, vals in grouped.items()]


# ======================
#  STATS
# ======================

class AnnotationStats(BaseModel):
    videos: int
    abnormal_videos: int
    total_glances: int
    glances_per_video: float
    glances_per_abnormal_video: float
    per_class: dict[str, int]
    target_glances_per_video: float
    deviation_from_target: float


def annotation_stats(
    glance_sets: List[GlanceSet],
    target: Optional[float] = REFERENCE_GLANCES_PER_VIDEO,
) -> AnnotationStats:
    """Corpus summary. The glance target is compared against the per-annotated-video mean."""
    abnormal = [g for g in glance_sets if not is_normal(g.anomaly_class)]
    total = sum(len(g.glances) for g in glance_sets)
    per_abnormal = total / len(abnormal) if abnormal else 0.0
    return AnnotationStats(
        videos=len(glance_sets),
        abnormal_videos=len(abnormal),
        total_glances=total,
        glances_per_video=total / len(glance_sets) if glance_sets else 0.0,
        glances_per_abnormal_video=per_abnormal,
        per_class=dict(sorted(Counter(g.anomaly_class for g in glance_sets).items())),
        target_glances_per_video=target or 0.0,
        deviation_from_target=per_abnormal - (target or 0.0),
    )
