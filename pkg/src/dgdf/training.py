"""Debiased training: importance ratios, the online loss, auxiliary head
supervision, optimizers, a single train step, offline pretraining, and the
closed-form enumeration oracle that validates the reweighting.

The delivery pipeline re-delivers recovered fake negatives, so the trainer
sees a biased label distribution. With y_p ~ P(convert within the wait
window | x) and y_fn ~ P(convert after it | x), the bridge between the
biased conditional b(y|x) and the true p(y|x) gives per-class importance
ratios. Two modes are implemented:

  PAPER:  w_pos = 1 + y_fn,  w_neg = (1 + y_fn) (1 - y_p - y_fn)
  EXACT:  same w_pos,        w_neg = (1 + y_fn) (1 - y_p - y_fn) / (1 - y_p)

EXACT is the algebraically exact ratio p(y=0|x)/b(y=0|x) implied by the
same bridge; the enumeration oracle shows it zeroes the loss gap while the
PAPER form leaves a residual whenever fake negatives exist. Both are kept:
PAPER reproduces the published loss, EXACT is the default.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .graph import GraphState, NeighborSample, SampledEdge, SampledNode, item_key, user_key
from .model import FeatureScaler, HeadOutputs, ModelParams, forward_batch
from .pipeline import DeliveredSample, DeliveryKind, Label

PROB_FLOOR = 1e-7


class RatioMode(str, Enum):
    EXACT = "exact"
    PAPER = "paper"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size_offline: int = 1024
    batch_size_online: int = 32
    k: int = 1
    m: int = 4
    epsilon: float = 0.7
    window_len: float = 0.25 * 3600.0
    attribution_len: float = 24 * 3600.0
    seed: int = 0
    ratio_mode: RatioMode = RatioMode.EXACT
    optimizer: str = "sgd"  # "sgd" | "adam"
    offline_epochs: int = 2
    debias: bool = True  # plain BCE when off
    aux_trunk_shared: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size_offline < 1 or self.batch_size_online < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.ratio_mode, str):
            self.ratio_mode = RatioMode(self.ratio_mode)


# ---------------------------------------------------------------------------
# importance ratios and losses


def importance_ratios(y_p_hat, y_fn_hat, mode: RatioMode):
    """Per-class importance weights (w_pos, w_neg) from the head estimates.

    Accepts scalars or arrays. Requires 0 <= y_p, y_fn and y_p + y_fn < 1.
    """
    y_p = np.asarray(y_p_hat, dtype=np.float64)
    y_fn = np.asarray(y_fn_hat, dtype=np.float64)
    if np.any(y_p < 0) or np.any(y_fn < 0) or np.any(y_p >= 1) or np.any(y_fn >= 1):
        raise ValueError("importance_ratios: estimates must lie in [0, 1)")
    if np.any(y_p + y_fn >= 1):
        raise ValueError("importance_ratios: need y_p + y_fn < 1")
    w_pos = 1.0 + y_fn
    w_neg = (1.0 + y_fn) * (1.0 - y_p - y_fn)
    if mode is RatioMode.EXACT:
        w_neg = w_neg / (1.0 - y_p)
    if np.isscalar(y_p_hat) and np.isscalar(y_fn_hat):
        return float(w_pos), float(w_neg)
    return w_pos, w_neg


def _bce_sum(y: Tensor, targets: np.ndarray, weights: np.ndarray | None = None):
    """Summed binary cross-entropy with clamped probabilities.

    Returns (loss tensor, number of clamped probabilities).
    """
    clamped = int(np.sum((y.values < PROB_FLOOR) | (y.values > 1.0 - PROB_FLOOR)))
    y_c = ad.clip(y, PROB_FLOOR, 1.0 - PROB_FLOOR)
    coef_pos = targets if weights is None else targets * weights
    coef_neg = (1.0 - targets) if weights is None else (1.0 - targets) * weights
    pos_term = ad.mul(Tensor(coef_pos), ad.log(y_c))
    neg_term = ad.mul(Tensor(coef_neg), ad.log(ad.add(ad.scale(y_c, -1.0), Tensor(1.0))))
    return ad.scale(ad.sum(ad.add(pos_term, neg_term)), -1.0), clamped


def _clamped_simplex(y_p: np.ndarray, y_fn: np.ndarray):
    """Project raw head values into the open simplex the ratios require.

    Early in training the two sigmoid heads can sum past 1; both values are
    floored/capped and the pair rescaled when needed. Returns the projected
    pair and how many entries were touched.
    """
    p = np.clip(y_p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    fn = np.clip(y_fn, PROB_FLOOR, 1.0 - PROB_FLOOR)
    touched = int(np.sum((p != y_p) | (fn != y_fn)))
    total = p + fn
    over = total >= 1.0 - PROB_FLOOR
    if np.any(over):
        scale_f = (1.0 - PROB_FLOOR) / total
        p = np.where(over, p * scale_f, p)
        fn = np.where(over, fn * scale_f, fn)
        touched += int(np.sum(over))
    return p, fn, touched


def debias_loss(outputs: HeadOutputs, labels: np.ndarray, mode: RatioMode):
    """Importance-weighted log loss over a delivered batch.

    The p/fn head outputs enter as plain values (their backpropagation is cut);
    gradients reach only the CVR pathway. Returns (loss tensor, clamp count).
    """
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("debias_loss: labels must be 0/1 trainer deliveries")
    y_p = ad.stop_gradient(outputs.y_p).values
    y_fn = ad.stop_gradient(outputs.y_fn).values
    y_p, y_fn, n_projected = _clamped_simplex(y_p, y_fn)
    w_pos, w_neg = importance_ratios(y_p, y_fn, mode)
    weights = labels * w_pos + (1.0 - labels) * w_neg
    loss, n_clamped = _bce_sum(outputs.y_cvr, labels, weights)
    return loss, n_clamped + n_projected


def bce_loss(outputs: HeadOutputs, labels: np.ndarray):
    """Unweighted summed BCE on the CVR head (baseline policies)."""
    labels = np.asarray(labels, dtype=np.float64)
    return _bce_sum(outputs.y_cvr, labels)


def aux_targets(deliveries: list[DeliveredSample]) -> tuple[np.ndarray, np.ndarray]:
    """Supervision for the auxiliary heads, from pipeline-observable signals:
    window-end positives train the p head, calibration re-deliveries train
    the fn head."""
    p_t = np.array(
        [
            1.0 if (d.kind is DeliveryKind.WINDOW_END and d.label is Label.POSITIVE) else 0.0
            for d in deliveries
        ]
    )
    fn_t = np.array([1.0 if d.kind is DeliveryKind.CALIBRATION else 0.0 for d in deliveries])
    return p_t, fn_t


def aux_losses(outputs: HeadOutputs, p_targets: np.ndarray, fn_targets: np.ndarray):
    """Summed BCE for the two auxiliary heads; returns (loss, clamp count)."""
    loss_p, c1 = _bce_sum(outputs.y_p, np.asarray(p_targets, dtype=np.float64))
    loss_fn, c2 = _bce_sum(outputs.y_fn, np.asarray(fn_targets, dtype=np.float64))
    return ad.add(loss_p, loss_fn), c1 + c2


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, tensors: list[Tensor], lr: float):
        self.tensors = tensors
        self.lr = lr

    def step(self) -> None:
        for t in self.tensors:
            if t.grad is not None:
                t.values = t.values - self.lr * t.grad
                t.grad = None


class Adam:
    def __init__(self, tensors: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = tensors
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(t.values) for t in tensors]
        self.v = [np.zeros_like(t.values) for t in tensors]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, t in enumerate(self.tensors):
            if t.grad is None:
                continue
            g = t.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            t.values = t.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            t.grad = None


def make_optimizer(cfg: TrainConfig, tensors: list[Tensor]):
    if cfg.optimizer == "adam":
        return Adam(tensors, cfg.learning_rate)
    return SGD(tensors, cfg.learning_rate)


# ---------------------------------------------------------------------------
# graph sampling for training / evaluation


def sample_for_pair(
    graph: GraphState,
    sample,
    k: int,
    t: float,
) -> NeighborSample:
    """Neighbor sample for scoring a click's (user, item) pair as of time t.

    Seeds missing from the graph (possible under policies that never emit
    unlabeled deliveries) are synthesized as isolated nodes carrying the
    click's own features. The click being scored is itself a known
    interaction at scoring time, so if the pair has no retained edge an
    unlabeled one is injected into the sample (not the graph); this keeps
    the scoring condition identical between training deliveries (whose
    instant edge is already stored) and evaluation clicks (whose delivery
    has not been ingested yet).
    """
    u_key = user_key(sample.user_id)
    i_key = item_key(sample.item_id)
    present = [key for key in (u_key, i_key) if graph.has_node(key)]
    if len(present) == 2:
        out = graph.khop_sample([u_key, i_key], k, t)
    elif len(present) == 1:
        out = graph.khop_sample(present, k, t)
    else:
        out = NeighborSample([], [], [], t)
    nodes = list(out.nodes)
    edges = list(out.edges)
    index = {n.key: i for i, n in enumerate(nodes)}
    for key, dense, cats in (
        (u_key, sample.user_dense, sample.user_cats),
        (i_key, sample.item_dense, sample.item_cats),
    ):
        if key not in index:
            index[key] = len(nodes)
            nodes.append(SampledNode(key, (tuple(dense), tuple(cats)), 0, 0))
    u_idx, i_idx = index[u_key], index[i_key]
    if not any(
        {e.user_idx, e.item_idx} == {u_idx, i_idx} for e in edges
    ):
        edges.append(SampledEdge(u_idx, i_idx, Label.UNLABELED, t))
        nodes[u_idx] = SampledNode(
            nodes[u_idx].key, nodes[u_idx].attribute, nodes[u_idx].degree + 1, nodes[u_idx].hop
        )
        nodes[i_idx] = SampledNode(
            nodes[i_idx].key, nodes[i_idx].attribute, nodes[i_idx].degree + 1, nodes[i_idx].hop
        )
    return NeighborSample(nodes, edges, [u_idx, i_idx], t)


@dataclass
class StepMetrics:
    loss: float
    n_deliveries: int
    clamp_count: int
    mean_filter_weight: float | None
    mean_label: float
    max_delivery_time: float


def train_step(
    params: ModelParams,
    scaler: FeatureScaler,
    graph: GraphState,
    deliveries: list[DeliveredSample],
    cfg: TrainConfig,
    optimizer,
) -> StepMetrics:
    """One optimizer update on a micro-batch of trainer deliveries.

    The caller applies the batch's graph events only after this returns; a
    positive delivery whose edge event is already in the graph is a contract
    violation and raises.
    """
    for d in deliveries:
        if d.label is Label.POSITIVE:
            u = user_key(d.sample.user_id)
            if graph.has_node(u):
                for e in graph.adj[u]:
                    if (
                        e.item_key == item_key(d.sample.item_id)
                        and e.label is Label.POSITIVE
                        and e.timestamp == d.delivery_time
                    ):
                        raise DataError(
                            f"ordering violation: positive edge for sample "
                            f"{d.sample.sample_id} already applied at t={d.delivery_time}"
                        )

    samples = [sample_for_pair(graph, d.sample, cfg.k, d.delivery_time) for d in deliveries]
    labels = np.array([1.0 if d.label is Label.POSITIVE else 0.0 for d in deliveries])

    with ad.Tape():
        outputs, info = forward_batch(
            params, scaler, samples, cfg.k, aux_detached=not cfg.aux_trunk_shared
        )
        if cfg.debias:
            loss, clamps = debias_loss(outputs, labels, cfg.ratio_mode)
            p_t, fn_t = aux_targets(deliveries)
            aux, aux_clamps = aux_losses(outputs, p_t, fn_t)
            total = ad.add(loss, aux)
            clamps += aux_clamps
        else:
            total, clamps = bce_loss(outputs, labels)
        ad.backward(total)
    optimizer.step()

    return StepMetrics(
        loss=total.item(),
        n_deliveries=len(deliveries),
        clamp_count=clamps,
        mean_filter_weight=info.mean_filter_weight,
        mean_label=float(labels.mean()),
        max_delivery_time=max(d.delivery_time for d in deliveries),
    )


def offline_pretrain(
    params: ModelParams,
    scaler: FeatureScaler,
    graph: GraphState,
    offline_samples: list,
    cfg: TrainConfig,
) -> ModelParams:
    """Plain average-BCE pretraining of all three heads on the offline split.

    Targets come from the fully observed offline outcomes: conversion within
    the attribution window (cvr head), within the wait window (p head), and
    between the two (fn head). No importance weights and no normalization of
    the head outputs.
    """
    if not offline_samples:
        raise ConfigError("offline_pretrain: empty offline split")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0FF1]))
    optimizer = make_optimizer(cfg, params.trainable())

    delays = np.array([s.delay for s in offline_samples])
    cvr_t = (delays <= cfg.attribution_len).astype(np.float64)
    p_t = (delays < cfg.window_len).astype(np.float64)
    fn_t = ((delays >= cfg.window_len) & (delays <= cfg.attribution_len)).astype(np.float64)

    n = len(offline_samples)
    for _ in range(cfg.offline_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size_offline):
            idx = order[lo : lo + cfg.batch_size_offline]
            batch = [offline_samples[i] for i in idx]
            samples = [sample_for_pair(graph, s, cfg.k, s.click_time) for s in batch]
            with ad.Tape():
                outputs, _ = forward_batch(
                    params, scaler, samples, cfg.k, aux_detached=not cfg.aux_trunk_shared
                )
                loss_cvr, _ = _bce_sum(outputs.y_cvr, cvr_t[idx])
                loss_p, _ = _bce_sum(outputs.y_p, p_t[idx])
                loss_fn, _ = _bce_sum(outputs.y_fn, fn_t[idx])
                total = ad.scale(
                    ad.add(ad.add(loss_cvr, loss_p), loss_fn), 1.0 / len(idx)
                )
                ad.backward(total)
            optimizer.step()
    return params


# ---------------------------------------------------------------------------
# enumeration oracle (closed-form validation of the reweighting)


@dataclass
class SyntheticDistribution:
    """A finite feature-cell world: per cell, conversion probability p1,
    late-conversion share q = P(delay beyond window | converted), and mass."""

    p1: np.ndarray
    q: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if not (self.p1.shape == self.q.shape == self.mass.shape):
            raise ConfigError("distribution arrays must share one shape")
        for name, arr in (("p1", self.p1), ("q", self.q), ("mass", self.mass)):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ConfigError(f"{name} entries must lie in [0, 1]")
        if abs(self.mass.sum() - 1.0) > 1e-9:
            raise ConfigError(f"cell masses must sum to 1, got {self.mass.sum()}")


@dataclass
class OracleReport:
    loss_ideal: float
    loss_weighted_biased: float
    gap: float


def distribution_oracle(
    dist: SyntheticDistribution, mode: RatioMode, scores: np.ndarray
) -> OracleReport:
    """Enumerate the biased delivery distribution and compare losses.

    Per cell the pipeline delivers negatives of mass (1 - p1) + p1 q (real
    negatives plus fake negatives at window end) and positives of mass p1
    (window positives plus duplicated calibrations), i.e. total 1 + p1 q.
    The weighted expected log-loss under the per-cell biased conditional is
    compared against the ideal expected log-loss under the true labels, for
    an arbitrary fixed scoring function.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != dist.p1.shape:
        raise ConfigError("scores must give one value per cell")
    if np.any(scores <= 0) or np.any(scores >= 1):
        raise ConfigError("scores must lie strictly inside (0, 1)")
    p1, q, mass = dist.p1, dist.q, dist.mass

    log_s = np.log(scores)
    log_1ms = np.log(1.0 - scores)
    loss_ideal = float(-np.sum(mass * (p1 * log_s + (1.0 - p1) * log_1ms)))

    denom = 1.0 + p1 * q
    b_pos = p1 / denom
    b_neg = (1.0 - p1 + p1 * q) / denom
    # oracle-true head values
    y_p = p1 * (1.0 - q)
    y_fn = p1 * q
    w_pos = 1.0 + y_fn
    w_neg = (1.0 + y_fn) * (1.0 - y_p - y_fn)
    if mode is RatioMode.EXACT:
        with np.errstate(divide="ignore", invalid="ignore"):
            w_neg = np.where(y_p < 1.0, w_neg / (1.0 - y_p), 0.0)
    loss_biased = float(
        -np.sum(mass * (b_pos * w_pos * log_s + b_neg * w_neg * log_1ms))
    )
    return OracleReport(
        loss_ideal=loss_ideal,
        loss_weighted_biased=loss_biased,
        gap=abs(loss_biased - loss_ideal),
    )
