import logging
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from config import LossWeights, PipelineConfig, config_hash
from errors import DegenerateDataset, DimMismatch, GradientCheckFailed
from losses import LossBreakdown, TrainBatch, loss_total
from models import FeatureStream, GlanceSet, PseudoLabelSeries
from pseudo_label import init_pseudo_labels, update_pseudo_labels
from scorer import PARAM_ORDER, ScorerModel, init_model, score_stream
from time_utils import format_elapsed

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5
GRADCHECK_FLOOR = 1e-4


class LabeledStream(BaseModel):
    """A training video: features plus its glance annotation."""

    stream: FeatureStream
    glances: GlanceSet


class EpochLog(BaseModel):
    epoch: int
    steps: int
    mil: float
    mag: float
    triplet: float
    kl: float
    abn: float
    total: float
    grad_norm: float
    seconds: float


class TrainingLog(BaseModel):
    config_hash: str
    seed: int
    epochs: List[EpochLog] = []


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name in PARAM_ORDER:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _split(dataset: List[LabeledStream]) -> Tuple[List[LabeledStream], List[LabeledStream]]:
    abnormal = [item for item in dataset if item.stream.is_anomalous]
    normal = [item for item in dataset if not item.stream.is_anomalous]
    if not abnormal or not normal:
        raise DegenerateDataset(
            f"training needs both classes, got {len(abnormal)} abnormal and {len(normal)} normal streams"
        )
    dims = {item.stream.feature_dim for item in dataset}
    if len(dims) != 1:
        raise DimMismatch(f"streams disagree on feature dim: {sorted(dims)}")
    for item in abnormal:
        item.glances.check_bounds(item.stream.snippet_count)
    return abnormal, normal


def refresh_pseudo_labels(
    model: ScorerModel,
    abnormal: List[LabeledStream],
    cfg: PipelineConfig,
    initial: bool,
) -> List[PseudoLabelSeries]:
    if initial:
        return [
            init_pseudo_labels(item.glances, item.stream.snippet_count, cfg.smoothing_ratio, cfg.sigma_mode)
            for item in abnormal
        ]
    return [update_pseudo_labels(score_stream(model, item.stream), item.glances, cfg) for item in abnormal]


def fit(
    dataset: List[LabeledStream],
    cfg: PipelineConfig,
    model: Optional[ScorerModel] = None,
) -> Tuple[ScorerModel, TrainingLog]:
    """Train on abnormal/normal pairs, refreshing pseudo labels at the start of every epoch."""
    abnormal, normal = _split(dataset)
    model = model.copy() if model is not None else init_model(abnormal[0].stream.feature_dim, cfg)
    optimizer = Adam(model.params, cfg.learning_rate)
    rng = np.random.default_rng([cfg.rng_seed, 1])
    log = TrainingLog(config_hash=config_hash(cfg), seed=cfg.rng_seed)
    started = time.perf_counter()
    logger.info(
        f"Training scorer on {len(abnormal)} abnormal / {len(normal)} normal streams "
        f"for {cfg.epochs} epochs (lr={cfg.learning_rate}, abn weight={cfg.weights.abn})"
    )

    for epoch in range(cfg.epochs):
        epoch_start = time.perf_counter()
        labels = refresh_pseudo_labels(model, abnormal, cfg, initial=epoch == 0)
        order_a = rng.permutation(len(abnormal))
        order_n = rng.permutation(len(normal))
        steps = max(len(abnormal), len(normal))
        sums = dict.fromkeys(LossBreakdown.model_fields, 0.0)
        grad_norm = 0.0

        for step in range(steps):
            a = int(order_a[step % len(abnormal)])
            n = int(order_n[step % len(normal)])
            batch = TrainBatch(
                abnormal=abnormal[a].stream,
                normal=normal[n].stream,
                glances=abnormal[a].glances,
                pseudo_labels=labels[a],
            )
            breakdown, grads = loss_total(model, batch, cfg)
            grad_norm += clip_gradients(grads, cfg.grad_clip)
            optimizer.step(model.params, grads)
            for key, value in breakdown.model_dump().items():
                sums[key] += value

        entry = EpochLog(
            epoch=epoch,
            steps=steps,
            grad_norm=grad_norm / steps,
            seconds=time.perf_counter() - epoch_start,
            **{key: value / steps for key, value in sums.items()},
        )
        log.epochs.append(entry)
        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs} | total {entry.total:.4f} | mil {entry.mil:.4f} | "
            f"abn {entry.abn:.4f} | grad {entry.grad_norm:.3f}"
        )

    logger.info(f"Training finished in {format_elapsed(time.perf_counter() - started)}")
    return model, log


# ======================
#  GRADIENT CHECK
# ======================

class ParamCheck(BaseModel):
    name: str
    size: int
    max_rel_error: float


class GradientCheckReport(BaseModel):
    seeds: List[int]
    tolerance: float
    max_rel_error: float
    worst_parameter: str
    parameters: List[ParamCheck]
    passed: bool


def _random_case(seed: int, cfg: PipelineConfig) -> Tuple[ScorerModel, TrainBatch, PipelineConfig]:
    rng = np.random.default_rng([seed, 7])
    d = int(rng.integers(2, 9))
    h = int(rng.integers(2, 9))
    k = int(rng.integers(2, 5))
    t_a, t_n = int(rng.integers(4, 13)), int(rng.integers(4, 13))
    case_cfg = cfg.model_copy(update={
        "hidden_dim": h,
        "memory_slots": k,
        "local_window": 3,
        "rng_seed": seed,
        "topk_ratio": 0.25,
        "weights": LossWeights(mag=0.5, triplet=0.5, kl=0.5, abn=1.0),
    })
    model = init_model(d, case_cfg)
    abnormal = FeatureStream(video_id=f"gc-a{seed}", features=rng.normal(size=(t_a, d)), anomaly_class="Explosion")
    normal = FeatureStream(video_id=f"gc-n{seed}", features=rng.normal(size=(t_n, d)))
    glance_points = sorted(rng.choice(t_a, size=min(2, t_a), replace=False).tolist())
    glances = GlanceSet(video_id=abnormal.video_id, anomaly_class="Explosion", glances=tuple(glance_points))
    labels = init_pseudo_labels(glances, t_a, 0.1)
    batch = TrainBatch(abnormal=abnormal, normal=normal, glances=glances, pseudo_labels=labels)
    return model, batch, case_cfg


def numeric_gradient(model: ScorerModel, batch: TrainBatch, cfg: PipelineConfig, name: str, step=GRADCHECK_STEP):
    param = model.params[name]
    numeric = np.zeros_like(param)
    for index in np.ndindex(param.shape):
        original = param[index]
        param[index] = original + step
        plus = loss_total(model, batch, cfg)[0].total
        param[index] = original - step
        minus = loss_total(model, batch, cfg)[0].total
        param[index] = original
        numeric[index] = (plus - minus) / (2.0 * step)
    return numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRADCHECK_FLOOR) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dividing by ~0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def gradient_check(
    cfg: PipelineConfig,
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4),
    tolerance: float = GRADCHECK_TOLERANCE,
    raise_on_failure: bool = False,
) -> GradientCheckReport:
    """Compare analytic gradients with central differences on small random problems."""
    worst: Dict[str, ParamCheck] = {}
    for seed in seeds:
        model, batch, case_cfg = _random_case(seed, cfg)
        _, analytic = loss_total(model, batch, case_cfg)
        for name in PARAM_ORDER:
            err = relative_error(analytic[name], numeric_gradient(model, batch, case_cfg, name))
            current = worst.get(name)
            if current is None or err > current.max_rel_error:
                worst[name] = ParamCheck(name=name, size=int(analytic[name].size), max_rel_error=err)
        logger.debug(f"Gradient check seed {seed}: worst so far {max(p.max_rel_error for p in worst.values()):.2e}")

    overall = max(worst.values(), key=lambda p: p.max_rel_error)
    report = GradientCheckReport(
        seeds=list(seeds),
        tolerance=tolerance,
        max_rel_error=overall.max_rel_error,
        worst_parameter=overall.name,
        parameters=[worst[name] for name in PARAM_ORDER],
        passed=overall.max_rel_error < tolerance,
    )
    logger.info(
        f"Gradient check over {len(seeds)} seeds: max relative error {report.max_rel_error:.2e} "
        f"({report.worst_parameter}) -> {'pass' if report.passed else 'FAIL'}"
    )
    if raise_on_failure and not report.passed:
        raise GradientCheckFailed(
            f"max relative error {report.max_rel_error:.2e} on {report.worst_parameter} exceeds {tolerance:g}"
        )
    return report
