"""Anomaly scoring network: input projection, global and local self-attention,
abnormal/normal memory banks and a sigmoid classifier head, in plain numpy
with a hand-written reverse pass.

Shapes: X is T x D, every embedding is T x H, memories are K x H.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit, softmax

from config import PipelineConfig, config_hash
from errors import DimMismatch, IoFailure, SchemaViolation, TruncatedPayload
from models import FeatureStream, ScoreSeries
from pseudo_label import BCE_EPS

logger = logging.getLogger(__name__)

PARAM_ORDER = (
    "w_in", "b_in",
    "wq_global", "wk_global", "wv_global",
    "wq_local", "wk_local", "wv_local",
    "mem_abnormal", "mem_normal",
    "w_cls", "b_cls",
)
CHECKPOINT_MAGIC = b"HVADCK01"
# scores stay strictly inside (0, 1) even when the logit saturates expit
SCORE_EPS = BCE_EPS


class ScorerModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    input_dim: int
    hidden_dim: int
    memory_slots: int
    window: int
    seed: int
    config_hash: str = ""
    params: Dict[str, np.ndarray]

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return parameter_shapes(self.input_dim, self.hidden_dim, self.memory_slots)

    def copy(self) -> "ScorerModel":
        return self.model_copy(update={"params": {k: v.copy() for k, v in self.params.items()}})

    def parameter_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())


def parameter_shapes(d: int, h: int, k: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "w_in": (d, h), "b_in": (h,),
        "wq_global": (h, h), "wk_global": (h, h), "wv_global": (h, h),
        "wq_local": (h, h), "wk_local": (h, h), "wv_local": (h, h),
        "mem_abnormal": (k, h), "mem_normal": (k, h),
        "w_cls": (h,), "b_cls": (1,),
    }


def _fan_in(name: str, d: int, h: int) -> int:
    return d if name in ("w_in", "b_in") else h


def init_model(input_dim: int, cfg: PipelineConfig) -> ScorerModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, drawn in PARAM_ORDER from rng_seed."""
    rng = np.random.default_rng(cfg.rng_seed)
    shapes = parameter_shapes(input_dim, cfg.hidden_dim, cfg.memory_slots)
    params = {}
    for name in PARAM_ORDER:
        bound = 1.0 / np.sqrt(_fan_in(name, input_dim, cfg.hidden_dim))
        params[name] = rng.uniform(-bound, bound, size=shapes[name])
    return ScorerModel(
        input_dim=input_dim,
        hidden_dim=cfg.hidden_dim,
        memory_slots=cfg.memory_slots,
        window=cfg.local_window,
        seed=cfg.rng_seed,
        config_hash=config_hash(cfg),
        params=params,
    )


# ======================
#  FORWARD
# ======================

class ForwardPass(BaseModel):
    """Scores and every intermediate the reverse pass needs."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    base: np.ndarray          # tanh(X W_in + b_in)
    global_cache: dict
    local_cache: dict
    embeddings: np.ndarray    # base + global + local
    scores: np.ndarray
    read_abnormal: np.ndarray
    read_normal: np.ndarray
    weights_abnormal: np.ndarray
    weights_normal: np.ndarray

    @property
    def memory_reads(self) -> Dict[str, np.ndarray]:
        return {"abnormal": self.read_abnormal, "normal": self.read_normal}


def local_mask(length: int, window: int) -> np.ndarray:
    idx = np.arange(length)
    return np.abs(idx[:, None] - idx[None, :]) <= window // 2


def _attend(base: np.ndarray, wq, wk, wv, mask: Optional[np.ndarray]):
    scale = 1.0 / np.sqrt(base.shape[1])
    q, k, v = base @ wq, base @ wk, base @ wv
    logits = (q @ k.T) * scale
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    attn = softmax(logits, axis=1)
    return attn @ v, {"q": q, "k": k, "v": v, "attn": attn}


def memory_read(embeddings: np.ndarray, memory: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-position softmax attention over memory slots; returns (reads, weights)."""
    scale = 1.0 / np.sqrt(embeddings.shape[1])
    weights = softmax((embeddings @ memory.T) * scale, axis=1)
    return weights @ memory, weights


def forward(model: ScorerModel, stream: FeatureStream | np.ndarray) -> ForwardPass:
    x = np.asarray(stream.features if isinstance(stream, FeatureStream) else stream, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimMismatch(f"stream has feature dim {x.shape[-1]}, model expects {model.input_dim}")
    p = model.params

    base = np.tanh(x @ p["w_in"] + p["b_in"])
    glob, global_cache = _attend(base, p["wq_global"], p["wk_global"], p["wv_global"], None)
    loc, local_cache = _attend(
        base, p["wq_local"], p["wk_local"], p["wv_local"], local_mask(x.shape[0], model.window)
    )
    embeddings = base + glob + loc
    scores = np.clip(expit(embeddings @ p["w_cls"] + p["b_cls"][0]), SCORE_EPS, 1.0 - SCORE_EPS)
    read_a, weights_a = memory_read(embeddings, p["mem_abnormal"])
    read_n, weights_n = memory_read(embeddings, p["mem_normal"])
    return ForwardPass(
        features=x,
        base=base,
        global_cache=global_cache,
        local_cache=local_cache,
        embeddings=embeddings,
        scores=scores,
        read_abnormal=read_a,
        read_normal=read_n,
        weights_abnormal=weights_a,
        weights_normal=weights_n,
    )


def score_stream(model: ScorerModel, stream: FeatureStream) -> ScoreSeries:
    return ScoreSeries(video_id=stream.video_id, scores=forward(model, stream).scores)


def score_streams(model: ScorerModel, streams: List[FeatureStream]) -> List[ScoreSeries]:
    return [score_stream(model, s) for s in streams]


# ======================
#  REVERSE PASS
# ======================

def zero_grads(model: ScorerModel) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in model.params.items()}


def _attend_backward(base, wq, wk, wv, cache, d_out):
    scale = 1.0 / np.sqrt(base.shape[1])
    q, k, v, attn = cache["q"], cache["k"], cache["v"], cache["attn"]
    d_attn = d_out @ v.T
    d_v = attn.T @ d_out
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    d_q = (d_logits @ k) * scale
    d_k = (d_logits.T @ q) * scale
    d_base = d_q @ wq.T + d_k @ wk.T + d_v @ wv.T
    return d_base, base.T @ d_q, base.T @ d_k, base.T @ d_v


def _memory_backward(embeddings, memory, weights, d_read):
    scale = 1.0 / np.sqrt(embeddings.shape[1])
    d_weights = d_read @ memory.T
    d_memory = weights.T @ d_read
    d_logits = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
    d_embeddings = (d_logits @ memory) * scale
    d_memory += (d_logits.T @ embeddings) * scale
    return d_embeddings, d_memory


def backward(
    model: ScorerModel,
    fwd: ForwardPass,
    grads: Dict[str, np.ndarray],
    d_scores: Optional[np.ndarray] = None,
    d_embeddings: Optional[np.ndarray] = None,
    d_read_abnormal: Optional[np.ndarray] = None,
    d_read_normal: Optional[np.ndarray] = None,
) -> None:
    """Accumulate parameter gradients into `grads` given upstream gradients of one forward pass."""
    p = model.params
    d_emb = np.zeros_like(fwd.embeddings) if d_embeddings is None else np.array(d_embeddings, dtype=np.float64)

    if d_scores is not None:
        inside = (fwd.scores > SCORE_EPS) & (fwd.scores < 1.0 - SCORE_EPS)
        d_logit = np.where(inside, d_scores * fwd.scores * (1.0 - fwd.scores), 0.0)
        grads["w_cls"] += fwd.embeddings.T @ d_logit
        grads["b_cls"] += d_logit.sum()
        d_emb += np.outer(d_logit, p["w_cls"])

    for d_read, name, weights in (
        (d_read_abnormal, "mem_abnormal", fwd.weights_abnormal),
        (d_read_normal, "mem_normal", fwd.weights_normal),
    ):
        if d_read is None:
            continue
        d_e, d_m = _memory_backward(fwd.embeddings, p[name], weights, d_read)
        d_emb += d_e
        grads[name] += d_m

    # embeddings = base + global + local
    d_base = d_emb.copy()
    for scope, cache in (("global", fwd.global_cache), ("local", fwd.local_cache)):
        wq, wk, wv = p[f"wq_{scope}"], p[f"wk_{scope}"], p[f"wv_{scope}"]
        d_b, d_wq, d_wk, d_wv = _attend_backward(fwd.base, wq, wk, wv, cache, d_emb)
        d_base += d_b
        grads[f"wq_{scope}"] += d_wq
        grads[f"wk_{scope}"] += d_wk
        grads[f"wv_{scope}"] += d_wv

    d_pre = d_base * (1.0 - fwd.base ** 2)
    grads["w_in"] += fwd.features.T @ d_pre
    grads["b_in"] += d_pre.sum(axis=0)


# ======================
#  CHECKPOINTS
# ======================

def encode_checkpoint(model: ScorerModel) -> bytes:
    """Magic, u32 header length, canonical JSON header, then f64 LE parameters in PARAM_ORDER."""
    header = {
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "memory_slots": model.memory_slots,
        "window": model.window,
        "seed": model.seed,
        "config_hash": model.config_hash,
        "param_order": list(PARAM_ORDER),
    }
    blob = b"".join(np.asarray(model.params[name], dtype="<f8").tobytes(order="C") for name in PARAM_ORDER)
    header["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw + blob


def decode_checkpoint(data: bytes) -> ScorerModel:
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise SchemaViolation("not a scorer checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise TruncatedPayload("checkpoint ends inside the header length", offset=len(data))
    (length,) = struct.unpack_from("<I", data, offset)
    offset += 4
    try:
        header = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaViolation(f"checkpoint header unreadable: {e}") from e
    offset += length
    if header.get("param_order") != list(PARAM_ORDER):
        raise SchemaViolation("checkpoint parameter order does not match this scorer")

    blob = data[offset:]
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise SchemaViolation("checkpoint parameter blob is corrupt or truncated")
    shapes = parameter_shapes(header["input_dim"], header["hidden_dim"], header["memory_slots"])
    params, cursor = {}, 0
    for name in PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=cursor).reshape(shapes[name]).copy()
        cursor += 8 * count
    return ScorerModel(
        input_dim=header["input_dim"],
        hidden_dim=header["hidden_dim"],
        memory_slots=header["memory_slots"],
        window=header["window"],
        seed=header["seed"],
        config_hash=header["config_hash"],
        params=params,
    )


def save_checkpoint(model: ScorerModel, path: str | Path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(encode_checkpoint(model))
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved scorer checkpoint ({model.parameter_count()} parameters) to {path}")


def load_checkpoint(path: str | Path) -> ScorerModel:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)
