"""End-to-end run orchestration: split, offline pretrain, online streaming
loop with slot-wise evaluation, and multi-policy comparison.

The click log is split evenly by click time. The first half pretrains the
model and seeds the graph (via the engine's own pipeline, truncated at the
boundary). The second half is replayed through the configured policy's
pipeline: trainer deliveries accumulate into micro-batches, each batch is
trained strictly before its graph events are applied, and at every slot
boundary the current model is evaluated on the upcoming slot's clicks with
ground-truth labels. Evaluation data is identical across policies; only the
training stream differs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .graph import GraphState, item_key, user_key
from .metrics import EvalRecord, auc, nll
from .model import FeatureScaler, ModelConfig, ModelParams, forward_batch
from .pipeline import (
    ClickSample,
    DeliveredSample,
    Label,
    PipelineConfig,
    Policy,
    Route,
    replay,
    routing,
)
from .training import (
    TrainConfig,
    make_optimizer,
    offline_pretrain,
    sample_for_pair,
    train_step,
)

HOUR = 3600.0


@dataclass
class EngineConfig:
    policy: Policy
    train: TrainConfig
    model: ModelConfig
    slot_len: float = HOUR
    eval_max_per_slot: int = 400

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(self.train.window_len, self.train.attribution_len, self.policy)


@dataclass
class SlotMetric:
    slot_start: float
    policy: str
    auc: float  # NaN when undefined (single-class slot)
    nll: float
    n_eval: int


@dataclass
class StepEvent:
    step: int
    ts: float
    loss: float
    clamp_count: int
    mean_filter_weight: float | None
    mean_label: float


@dataclass
class RunResult:
    policy: str
    seed: int
    slot_metrics: list[SlotMetric]
    step_events: list[StepEvent]
    eval_records: list[EvalRecord]
    params: ModelParams
    graph: GraphState
    scaler: FeatureScaler
    deliveries_log: list[DeliveredSample] = field(default_factory=list)

    def mean_slot_auc(self) -> float:
        vals = [m.auc for m in self.slot_metrics if not math.isnan(m.auc)]
        if not vals:
            return math.nan
        return float(np.mean(vals))

    def mean_slot_nll(self) -> float:
        vals = [m.nll for m in self.slot_metrics if not math.isnan(m.nll)]
        if not vals:
            return math.nan
        return float(np.mean(vals))


def split_by_click_time(clicks: list[ClickSample]) -> tuple[list[ClickSample], list[ClickSample]]:
    """Even split by click order (input is click-time sorted)."""
    half = len(clicks) // 2
    return clicks[:half], clicks[half:]


def _apply_graph_delivery(graph: GraphState, scaler: FeatureScaler, d: DeliveredSample) -> None:
    """One TO_GRAPH delivery: node events for unlabeled samples (they carry
    the freshest features), then the edge event; positives only ensure their
    endpoints exist."""
    s = d.sample
    u, i = user_key(s.user_id), item_key(s.item_id)
    t = d.delivery_time
    if d.label is Label.UNLABELED:
        scaler.update(s.user_dense, "u")
        scaler.update(s.item_dense, "i")
        graph.apply_node_event(u, (s.user_dense, s.user_cats), t)
        graph.apply_node_event(i, (s.item_dense, s.item_cats), t)
        graph.apply_edge_event(u, i, Label.UNLABELED, t)
    else:
        for key, dense, cats in ((u, s.user_dense, s.user_cats), (i, s.item_dense, s.item_cats)):
            if not graph.has_node(key):
                scaler.update(dense, key[0])
                graph.apply_node_event(key, (dense, cats), t)
        graph.apply_edge_event(u, i, Label.POSITIVE, t)


def build_offline_graph(
    offline: list[ClickSample],
    boundary: float,
    cfg: EngineConfig,
    scaler: FeatureScaler,
) -> GraphState:
    """Replay the engine's own pipeline over the offline split, applying
    graph deliveries that land before the online boundary."""
    graph = GraphState(edge_cap_m=cfg.train.m)
    pipe = PipelineConfig(cfg.train.window_len, cfg.train.attribution_len, Policy.DGDFEM)
    for d in replay(offline, pipe):
        if d.delivery_time > boundary:
            break
        if Route.TO_GRAPH in routing(d):
            _apply_graph_delivery(graph, scaler, d)
    return graph


def _eval_slot(
    params: ModelParams,
    scaler: FeatureScaler,
    graph: GraphState,
    slot_clicks: list[ClickSample],
    cfg: EngineConfig,
    rng: np.random.Generator,
) -> list[EvalRecord]:
    if not slot_clicks:
        return []
    clicks = slot_clicks
    if len(clicks) > cfg.eval_max_per_slot:
        idx = np.sort(rng.choice(len(clicks), size=cfg.eval_max_per_slot, replace=False))
        clicks = [clicks[j] for j in idx]
    samples = [sample_for_pair(graph, s, cfg.train.k, s.click_time) for s in clicks]
    outputs, _ = forward_batch(params, scaler, samples, cfg.train.k)
    records = []
    for s, score in zip(clicks, outputs.y_cvr.values):
        truth = 1 if s.delay <= cfg.train.attribution_len else 0
        records.append(EvalRecord(float(score), truth, s.click_time))
    return records


def _slot_metric(records: list[EvalRecord], slot_start: float, policy: str) -> SlotMetric:
    if not records:
        return SlotMetric(slot_start, policy, math.nan, math.nan, 0)
    labels = {r.true_label for r in records}
    slot_auc = auc(records) if labels == {0, 1} else math.nan
    return SlotMetric(slot_start, policy, slot_auc, nll(records), len(records))


def run_policy(
    clicks: list[ClickSample], cfg: EngineConfig, seed: int, log_deliveries: bool = False
) -> RunResult:
    """Pretrain offline, then stream the online half under the policy."""
    if len(clicks) < 4:
        raise ConfigError("need at least 4 clicks to split and stream")
    train_cfg = cfg.train
    offline, online = split_by_click_time(clicks)
    online_start = online[0].click_time

    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1217]))
    params = ModelParams.init(cfg.model, init_rng)
    scaler = FeatureScaler(cfg.model.n_user_dense, cfg.model.n_item_dense)

    graph = build_offline_graph(offline, online_start, cfg, scaler)
    pretrain_cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
    offline_pretrain(params, scaler, graph, offline, pretrain_cfg)

    result = RunResult(
        policy=cfg.policy.value,
        seed=seed,
        slot_metrics=[],
        step_events=[],
        eval_records=[],
        params=params,
        graph=graph,
        scaler=scaler,
    )

    optimizer = make_optimizer(train_cfg, params.trainable())
    online_training = cfg.policy is not Policy.PRETRAIN_STATIC

    t_end = online[-1].click_time
    n_slots = max(1, math.ceil((t_end - online_start) / cfg.slot_len + 1e-12))
    slot_clicks: list[list[ClickSample]] = [[] for _ in range(n_slots)]
    for s in online:
        j = min(int((s.click_time - online_start) / cfg.slot_len), n_slots - 1)
        slot_clicks[j].append(s)

    deliveries = replay(online, cfg.pipeline_config())
    pending: list[tuple[DeliveredSample, frozenset]] = []
    n_trainer_pending = 0
    step = 0

    def flush():
        nonlocal pending, n_trainer_pending, step
        if not pending:
            return
        trainer_batch = [d for d, routes in pending if Route.TO_TRAINER in routes]
        if trainer_batch and online_training:
            metrics = train_step(params, scaler, graph, trainer_batch, train_cfg, optimizer)
            step += 1
            result.step_events.append(
                StepEvent(
                    step=step,
                    ts=metrics.max_delivery_time,
                    loss=metrics.loss,
                    clamp_count=metrics.clamp_count,
                    mean_filter_weight=metrics.mean_filter_weight,
                    mean_label=metrics.mean_label,
                )
            )
        for d, routes in pending:
            if Route.TO_GRAPH in routes and online_training:
                _apply_graph_delivery(graph, scaler, d)
        pending = []
        n_trainer_pending = 0

    delivery_iter = iter(deliveries)
    carried: DeliveredSample | None = None
    for j in range(n_slots):
        slot_start = online_start + j * cfg.slot_len
        slot_end = slot_start + cfg.slot_len
        flush()
        eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1, j]))
        records = _eval_slot(params, scaler, graph, slot_clicks[j], cfg, eval_rng)
        result.eval_records.extend(records)
        result.slot_metrics.append(_slot_metric(records, slot_start, cfg.policy.value))

        while True:
            if carried is not None:
                d, carried = carried, None
            else:
                d = next(delivery_iter, None)
            if d is None:
                break
            if d.delivery_time >= slot_end:
                carried = d
                break
            if log_deliveries:
                result.deliveries_log.append(d)
            routes = routing(d)
            pending.append((d, routes))
            if Route.TO_TRAINER in routes:
                n_trainer_pending += 1
                if n_trainer_pending >= train_cfg.batch_size_online:
                    flush()
    flush()
    return result


def run_comparison(
    clicks: list[ClickSample],
    base_cfg: EngineConfig,
    policies: list[Policy],
    seed: int,
    log_deliveries: bool = False,
) -> dict[Policy, RunResult]:
    """Run each policy on the same stream with isolated model/graph state.

    Identical seeds give identical initialization and evaluation sets, so only
    the training stream differs between policies.
    """
    results: dict[Policy, RunResult] = {}
    for policy in policies:
        cfg = EngineConfig(
            policy=policy,
            train=base_cfg.train,
            model=base_cfg.model,
            slot_len=base_cfg.slot_len,
            eval_max_per_slot=base_cfg.eval_max_per_slot,
        )
        results[policy] = run_policy(clicks, cfg, seed, log_deliveries=log_deliveries)
    return results
