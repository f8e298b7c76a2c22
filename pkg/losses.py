"""Composite training objective for a (abnormal, normal) pair.

L = L_mil + w.mag * L_mag + w.triplet * L_triplet + w.kl * L_kl + w.abn * L_abn

The first four terms are compact reconstructions of the dual-memory baseline
losses; L_abn is the dense pseudo-label BCE.
"""
import math
from typing import Dict, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from config import PipelineConfig
from errors import DimMismatch, LengthMismatch
from models import FeatureStream, GlanceSet, PseudoLabelSeries, is_normal
from pseudo_label import BCE_EPS, abnormal_loss
from scorer import ForwardPass, ScorerModel, backward, forward, zero_grads

MAG_MARGIN = 1.0
TRIPLET_MARGIN = 1.0
KL_VAR_EPS = 1e-6
NORM_EPS = 1e-12


class TrainBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    abnormal: FeatureStream
    normal: FeatureStream
    glances: GlanceSet
    pseudo_labels: PseudoLabelSeries

    @model_validator(mode="after")
    def _check_pair(self):
        if is_normal(self.abnormal.anomaly_class):
            raise ValueError(f"{self.abnormal.video_id} is labelled Normal but sits in the abnormal slot")
        if not is_normal(self.normal.anomaly_class):
            raise ValueError(f"{self.normal.video_id} is labelled {self.normal.anomaly_class} but sits in the normal slot")
        if len(self.pseudo_labels.values) != self.abnormal.snippet_count:
            raise LengthMismatch(
                f"pseudo labels have {len(self.pseudo_labels.values)} values, "
                f"stream {self.abnormal.video_id} has {self.abnormal.snippet_count} snippets"
            )
        return self


class LossBreakdown(BaseModel):
    mil: float
    mag: float
    triplet: float
    kl: float
    abn: float
    total: float


def topk_indices(scores: np.ndarray, ratio: float) -> np.ndarray:
    k = min(len(scores), max(1, math.ceil(ratio * len(scores))))
    return np.argsort(-scores, kind="stable")[:k]


def _bce_at(p: float, target: float) -> Tuple[float, float]:
    clamped = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
    loss = -(target * math.log(clamped) + (1.0 - target) * math.log(1.0 - clamped))
    grad = -target / clamped + (1.0 - target) / (1.0 - clamped) if BCE_EPS < p < 1.0 - BCE_EPS else 0.0
    return loss, grad


def mil_loss(scores_a: np.ndarray, scores_n: np.ndarray, ratio: float):
    """BCE of mean top-k score against the video label, averaged over the pair."""
    idx_a, idx_n = topk_indices(scores_a, ratio), topk_indices(scores_n, ratio)
    loss_a, grad_a = _bce_at(float(scores_a[idx_a].mean()), 1.0)
    loss_n, grad_n = _bce_at(float(scores_n[idx_n].mean()), 0.0)
    d_a, d_n = np.zeros_like(scores_a), np.zeros_like(scores_n)
    d_a[idx_a] = 0.5 * grad_a / len(idx_a)
    d_n[idx_n] = 0.5 * grad_n / len(idx_n)
    return 0.5 * (loss_a + loss_n), d_a, d_n


def magnitude_loss(emb_a: np.ndarray, idx_a: np.ndarray, emb_n: np.ndarray):
    """Hinge on the gap between abnormal top-k and normal embedding magnitudes."""
    rows_a = emb_a[idx_a]
    norms_a = np.maximum(np.linalg.norm(rows_a, axis=1), NORM_EPS)
    norms_n = np.maximum(np.linalg.norm(emb_n, axis=1), NORM_EPS)
    hinge = MAG_MARGIN - (norms_a.mean() - norms_n.mean())
    d_a, d_n = np.zeros_like(emb_a), np.zeros_like(emb_n)
    if hinge <= 0:
        return 0.0, d_a, d_n
    d_a[idx_a] = -(rows_a / norms_a[:, None]) / len(idx_a)
    d_n[:] = (emb_n / norms_n[:, None]) / len(emb_n)
    return float(hinge), d_a, d_n


def _distance(diff: np.ndarray) -> np.ndarray:
    return np.sqrt((diff ** 2).sum(axis=1) + NORM_EPS)


def triplet_loss(read_a: np.ndarray, idx_a: np.ndarray, mem_abnormal: np.ndarray, mem_normal: np.ndarray):
    """Anchors: abnormal-memory reads at abnormal top-k; positive/negative: memory centroids."""
    anchors = read_a[idx_a]
    positive, negative = mem_abnormal.mean(axis=0), mem_normal.mean(axis=0)
    to_pos, to_neg = anchors - positive, anchors - negative
    dist_pos, dist_neg = _distance(to_pos), _distance(to_neg)
    per_anchor = dist_pos - dist_neg + TRIPLET_MARGIN
    active = per_anchor > 0
    k = len(idx_a)

    d_read = np.zeros_like(read_a)
    d_mem_a, d_mem_n = np.zeros_like(mem_abnormal), np.zeros_like(mem_normal)
    if not active.any():
        return 0.0, d_read, d_mem_a, d_mem_n
    unit_pos = (to_pos / dist_pos[:, None]) * active[:, None] / k
    unit_neg = (to_neg / dist_neg[:, None]) * active[:, None] / k
    np.add.at(d_read, idx_a, unit_pos - unit_neg)
    d_mem_a += -unit_pos.sum(axis=0) / len(mem_abnormal)
    d_mem_n += unit_neg.sum(axis=0) / len(mem_normal)
    return float(np.where(active, per_anchor, 0.0).mean()), d_read, d_mem_a, d_mem_n


def kl_loss(read_n: np.ndarray):
    """KL from the diagonal Gaussian fitted to normal-memory reads to N(0, I), averaged over dims."""
    length, dims = read_n.shape
    mu = read_n.mean(axis=0)
    centered = read_n - mu
    var = (centered ** 2).mean(axis=0) + KL_VAR_EPS
    loss = 0.5 * np.mean(var + mu ** 2 - 1.0 - np.log(var))
    d_mu = mu / dims
    d_var = 0.5 * (1.0 - 1.0 / var) / dims
    d_read = d_mu[None, :] / length + d_var[None, :] * 2.0 * centered / length
    return float(loss), d_read


def loss_total(
    model: ScorerModel,
    batch: TrainBatch,
    cfg: PipelineConfig,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Composite loss of one pair and the gradient for every parameter."""
    for stream in (batch.abnormal, batch.normal):
        if stream.feature_dim != model.input_dim:
            raise DimMismatch(f"{stream.video_id} has dim {stream.feature_dim}, model expects {model.input_dim}")
    w = cfg.weights
    fwd_a: ForwardPass = forward(model, batch.abnormal)
    fwd_n: ForwardPass = forward(model, batch.normal)
    idx_a = topk_indices(fwd_a.scores, cfg.topk_ratio)

    l_mil, ds_a_mil, ds_n = mil_loss(fwd_a.scores, fwd_n.scores, cfg.topk_ratio)
    l_mag, de_a, de_n = magnitude_loss(fwd_a.embeddings, idx_a, fwd_n.embeddings)
    l_tri, dr_a, dm_a, dm_n = triplet_loss(
        fwd_a.read_abnormal, idx_a, model.params["mem_abnormal"], model.params["mem_normal"]
    )
    l_kl, drn_n = kl_loss(fwd_n.read_normal)
    l_abn, ds_a_abn = abnormal_loss(fwd_a.scores, batch.pseudo_labels.values)

    total = l_mil + w.mag * l_mag + w.triplet * l_tri + w.kl * l_kl + w.abn * l_abn
    grads = zero_grads(model)
    backward(
        model, fwd_a, grads,
        d_scores=ds_a_mil + w.abn * ds_a_abn,
        d_embeddings=w.mag * de_a,
        d_read_abnormal=w.triplet * dr_a,
    )
    backward(
        model, fwd_n, grads,
        d_scores=ds_n,
        d_embeddings=w.mag * de_n,
        d_read_normal=w.kl * drn_n,
    )
    grads["mem_abnormal"] += w.triplet * dm_a
    grads["mem_normal"] += w.triplet * dm_n

    breakdown = LossBreakdown(mil=l_mil, mag=l_mag, triplet=l_tri, kl=l_kl, abn=l_abn, total=total)
    return breakdown, grads
