"""Debias training tests: ratio point checks against the duplicated-stream
enumeration, loss hand evaluations, exact stop-gradient behavior, train-step
contracts, pretrain convergence, and the distribution oracle identity."""
import math

import numpy as np
import pytest

from dgdf import autodiff as ad
from dgdf.autodiff import Tensor
from dgdf.errors import ConfigError, DataError
from dgdf.graph import GraphState, item_key, user_key
from dgdf.model import FeatureScaler, HeadOutputs, ModelConfig, ModelParams, forward_batch
from dgdf.pipeline import ClickSample, DeliveredSample, DeliveryKind, Label
from dgdf.training import (
    Adam,
    OracleReport,
    RatioMode,
    SGD,
    SyntheticDistribution,
    TrainConfig,
    aux_losses,
    aux_targets,
    bce_loss,
    debias_loss,
    distribution_oracle,
    importance_ratios,
    make_optimizer,
    offline_pretrain,
    sample_for_pair,
    train_step,
)

H = 3600.0


def ratio_enumeration_oracle(p1, q):
    """Enumerate the duplicated-delivery stream for one cell and return the
    true-to-biased probability ratios (pos, neg)."""
    # per unit of original traffic: positives p1 (window hits + calibrated
    # duplicates), negatives 1 - p1 + p1*q; total 1 + p1*q
    total = 1.0 + p1 * q
    b_pos = p1 / total
    b_neg = (1.0 - p1 + p1 * q) / total
    return (p1 / b_pos if p1 else 1.0), ((1.0 - p1) / b_neg if p1 < 1 else 1.0)


class TestImportanceRatios:
    def test_point_check_against_enumeration(self):
        p1, q = 0.4, 0.5
        y_p, y_fn = p1 * (1 - q), p1 * q
        w_pos, w_neg = importance_ratios(y_p, y_fn, RatioMode.EXACT)
        want_pos, want_neg = ratio_enumeration_oracle(p1, q)
        assert abs(w_pos - 1.2) < 1e-15 and abs(want_pos - 1.2) < 1e-15
        assert abs(w_neg - 0.9) < 1e-15 and abs(want_neg - 0.9) < 1e-15

    def test_paper_mode_drops_denominator(self):
        w_pos, w_neg = importance_ratios(0.2, 0.2, RatioMode.PAPER)
        assert abs(w_pos - 1.2) < 1e-15
        assert abs(w_neg - 0.72) < 1e-15

    def test_no_fake_negatives_is_identity(self):
        for mode in RatioMode:
            w_pos, w_neg = importance_ratios(0.3, 0.0, mode)
            assert w_pos == 1.0
            assert abs(w_neg - (1.0 if mode is RatioMode.EXACT else 0.7)) < 1e-15

    def test_exact_matches_enumeration_on_grid(self):
        for p1 in np.linspace(0.05, 0.9, 8):
            for q in np.linspace(0.0, 0.95, 8):
                y_p, y_fn = p1 * (1 - q), p1 * q
                w_pos, w_neg = importance_ratios(y_p, y_fn, RatioMode.EXACT)
                want_pos, want_neg = ratio_enumeration_oracle(p1, q)
                assert abs(w_pos - want_pos) < 1e-12
                assert abs(w_neg - want_neg) < 1e-12

    def test_bounds_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            y_p = rng.uniform(0, 0.98)
            y_fn = rng.uniform(0, 0.999 - y_p)
            w_pos, w_neg = importance_ratios(y_p, y_fn, RatioMode.EXACT)
            assert w_pos >= 1.0
            assert 0.0 < w_neg <= 1.0 + y_fn + 1e-12

    def test_contract_errors(self):
        with pytest.raises(ValueError):
            importance_ratios(0.6, 0.5, RatioMode.EXACT)  # sum >= 1
        with pytest.raises(ValueError):
            importance_ratios(-0.1, 0.2, RatioMode.EXACT)
        with pytest.raises(ValueError):
            importance_ratios(0.2, 1.0, RatioMode.PAPER)


def heads(y_p, y_fn, y_cvr):
    return HeadOutputs(
        y_p=Tensor(np.asarray(y_p, dtype=float)),
        y_fn=Tensor(np.asarray(y_fn, dtype=float)),
        y_cvr=Tensor(np.asarray(y_cvr, dtype=float), requires_grad=True),
    )


class TestDebiasLoss:
    def test_positive_term_hand_value(self):
        out = heads([0.3], [0.2], [0.5])
        loss, _ = debias_loss(out, np.array([1.0]), RatioMode.EXACT)
        assert abs(loss.item() - 1.2 * math.log(2)) < 1e-9

    def test_zero_heads_reduce_to_bce(self):
        out = heads([0.0], [0.0], [0.5])
        loss, _ = debias_loss(out, np.array([0.0]), RatioMode.EXACT)
        assert abs(loss.item() - math.log(2)) < 1e-5

    def test_batch_additivity(self):
        out = heads([0.3, 0.0], [0.2, 0.0], [0.5, 0.5])
        loss, _ = debias_loss(out, np.array([1.0, 0.0]), RatioMode.EXACT)
        assert abs(loss.item() - (1.2 * math.log(2) + math.log(2))) < 1e-5

    def test_rejects_unlabeled(self):
        out = heads([0.1], [0.1], [0.5])
        with pytest.raises(ValueError, match="labels"):
            debias_loss(out, np.array([-1.0]), RatioMode.EXACT)

    def test_clamp_counter_counts(self):
        out = heads([0.1], [0.1], [1.0])  # cvr at the boundary gets clamped
        _, clamps = debias_loss(out, np.array([1.0]), RatioMode.EXACT)
        assert clamps >= 1

    def test_gradient_reaches_only_cvr(self):
        y_p = Tensor(np.array([0.3]), requires_grad=True)
        y_fn = Tensor(np.array([0.2]), requires_grad=True)
        y_cvr = Tensor(np.array([0.6]), requires_grad=True)
        with ad.Tape():
            loss, _ = debias_loss(HeadOutputs(y_p, y_fn, y_cvr), np.array([1.0]), RatioMode.EXACT)
            ad.backward(loss)
        assert y_p.grad is None
        assert y_fn.grad is None
        assert y_cvr.grad is not None and abs(y_cvr.grad[0]) > 0


class TestAuxSupervision:
    def mk_delivery(self, label, kind):
        s = ClickSample(1, 0, 0, 0.0, 5 * H if label is Label.POSITIVE else None)
        return DeliveredSample(s, label, 10.0, kind)

    def test_targets_table(self):
        ds = [
            self.mk_delivery(Label.POSITIVE, DeliveryKind.WINDOW_END),
            self.mk_delivery(Label.POSITIVE, DeliveryKind.CALIBRATION),
            self.mk_delivery(Label.NEGATIVE, DeliveryKind.WINDOW_END),
        ]
        p_t, fn_t = aux_targets(ds)
        np.testing.assert_array_equal(p_t, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(fn_t, [0.0, 1.0, 0.0])

    def test_aux_loss_value(self):
        out = heads([0.5], [0.5], [0.5])
        loss, _ = aux_losses(out, np.array([1.0]), np.array([0.0]))
        assert abs(loss.item() - 2 * math.log(2)) < 1e-12


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(
        n_user_dense=2,
        user_vocab_sizes=(4,),
        n_item_dense=2,
        item_vocab_sizes=(4,),
        embed_dim=4,
        conv_channels=2,
        conv_kernel=2,
        **kw,
    )
    return ModelParams.init(cfg, np.random.default_rng(seed))


def tiny_scaler():
    s = FeatureScaler(2, 2)
    for role in ("u", "i"):
        s.update((0.0, 0.0), role)
        s.update((1.0, 1.0), role)
    return s


def toy_world(seed=0):
    """Small populated graph plus a click whose pair is present."""
    params = tiny_model(seed)
    scaler = tiny_scaler()
    g = GraphState(edge_cap_m=3)
    for u in range(3):
        g.apply_node_event(user_key(u), ((0.2, 0.4), (u,)), 0.0)
    for i in range(3):
        g.apply_node_event(item_key(i), ((0.6, 0.8), (i,)), 0.0)
    g.apply_edge_event(user_key(0), item_key(0), Label.UNLABELED, 1.0)
    g.apply_edge_event(user_key(1), item_key(0), Label.UNLABELED, 2.0)
    g.apply_edge_event(user_key(0), item_key(1), Label.POSITIVE, 3.0)
    return params, scaler, g


def trainer_delivery(sid, uid, iid, label, t, kind=DeliveryKind.WINDOW_END, conv=None):
    s = ClickSample(sid, uid, iid, 0.0, conv, (0.3, 0.3), (uid,), (0.7, 0.7), (iid,))
    return DeliveredSample(s, label, t, kind)


class TestTrainStep:
    def test_smoke_loss_finite_params_change(self):
        params, scaler, g = toy_world()
        cfg = TrainConfig(learning_rate=0.1, k=2, seed=0)
        opt = make_optimizer(cfg, params.trainable())
        before = params.heads["cvr"][0].values.copy()
        d = trainer_delivery(10, 0, 0, Label.POSITIVE, 5.0, DeliveryKind.CALIBRATION, conv=5.0)
        metrics = train_step(params, scaler, g, [d], cfg, opt)
        assert math.isfinite(metrics.loss)
        assert not np.array_equal(before, params.heads["cvr"][0].values)
        # caller applies the edge event afterwards
        g.apply_edge_event(user_key(0), item_key(0), Label.POSITIVE, 5.0)
        assert g.adj[user_key(0)][-1].label is Label.POSITIVE

    def test_deterministic_across_runs(self):
        outs = []
        for _ in range(2):
            params, scaler, g = toy_world(seed=3)
            cfg = TrainConfig(learning_rate=0.05, k=1, seed=1)
            opt = make_optimizer(cfg, params.trainable())
            ds = [
                trainer_delivery(10, 0, 0, Label.NEGATIVE, 5.0),
                trainer_delivery(11, 1, 0, Label.POSITIVE, 6.0, conv=4.0),
            ]
            train_step(params, scaler, g, ds, cfg, opt)
            outs.append({k: t.values.copy() for k, t in params.named().items()})
        for key in outs[0]:
            np.testing.assert_array_equal(outs[0][key], outs[1][key])

    def test_ordering_violation_raises(self):
        params, scaler, g = toy_world()
        cfg = TrainConfig(k=1, seed=0)
        opt = make_optimizer(cfg, params.trainable())
        g.apply_edge_event(user_key(0), item_key(0), Label.POSITIVE, 5.0)  # applied too early
        d = trainer_delivery(10, 0, 0, Label.POSITIVE, 5.0, DeliveryKind.CALIBRATION, conv=5.0)
        with pytest.raises(DataError, match="ordering violation"):
            train_step(params, scaler, g, [d], cfg, opt)

    def test_missing_seeds_fall_back_to_isolated_nodes(self):
        params, scaler, g = toy_world()
        s = ClickSample(99, 7, 9, 1.0, None, (0.3, 0.3), (7,), (0.7, 0.7), (9,))
        sample = sample_for_pair(g, s, k=2, t=2.0)
        assert len(sample.nodes) == 2
        assert sample.nodes[0].key == user_key(7)
        assert sample.nodes[1].key == item_key(9)
        # the click being scored is itself a known interaction
        assert len(sample.edges) == 1
        assert sample.edges[0].label is Label.UNLABELED
        assert all(n.degree == 1 for n in sample.nodes)

    def test_pair_edge_not_duplicated_when_present(self):
        params, scaler, g = toy_world()
        s = ClickSample(99, 0, 0, 10.0, None, (0.3, 0.3), (0,), (0.7, 0.7), (0,))
        sample = sample_for_pair(g, s, k=1, t=10.0)
        u_idx, i_idx = sample.seed_indices
        pair_edges = [e for e in sample.edges if {e.user_idx, e.item_idx} == {u_idx, i_idx}]
        assert len(pair_edges) == 1  # the stored unlabeled edge, no injection

    def test_one_present_seed_keeps_neighborhood(self):
        params, scaler, g = toy_world()
        s = ClickSample(99, 0, 9, 10.0, None, (0.3, 0.3), (0,), (0.7, 0.7), (9,))
        sample = sample_for_pair(g, s, k=1, t=10.0)
        keys = {n.key for n in sample.nodes}
        assert user_key(0) in keys and item_key(9) in keys
        assert len(sample.edges) >= 1  # user 0 has real neighbors
        assert sample.nodes[sample.seed_indices[1]].key == item_key(9)


class TestGradientIntegrity:
    def test_end_to_end_frozen_weight_check_and_exact_stop_gradient(self):
        params, scaler, g = toy_world(seed=5)
        cfg = TrainConfig(k=2, seed=0)
        deliveries = [
            trainer_delivery(10, 0, 0, Label.POSITIVE, 5.0, conv=2.0),
            trainer_delivery(11, 1, 0, Label.NEGATIVE, 6.0),
        ]
        samples = [sample_for_pair(g, d.sample, cfg.k, d.delivery_time) for d in deliveries]
        labels = np.array([1.0, 0.0])

        # freeze the importance weights at the base point: the training
        # gradient treats them as constants
        outputs, _ = forward_batch(params, scaler, samples, cfg.k)
        from dgdf.training import _clamped_simplex

        y_p, y_fn, _ = _clamped_simplex(outputs.y_p.values, outputs.y_fn.values)
        w_pos, w_neg = importance_ratios(y_p, y_fn, RatioMode.EXACT)
        weights = labels * w_pos + (1.0 - labels) * w_neg

        def frozen_loss():
            out, _ = forward_batch(params, scaler, samples, cfg.k)
            y_c = ad.clip(out.y_cvr, 1e-7, 1 - 1e-7)
            pos = ad.mul(Tensor(labels * weights), ad.log(y_c))
            neg = ad.mul(
                Tensor((1 - labels) * weights),
                ad.log(ad.add(ad.scale(y_c, -1.0), Tensor(1.0))),
            )
            return ad.scale(ad.sum(ad.add(pos, neg)), -1.0)

        aux_names = {"p", "fn"}
        live = [
            t
            for name, t in params.named().items()
            if not any(name.startswith(f"head_{n}_") for n in aux_names)
        ]
        err = ad.check_gradients(lambda *leaves: frozen_loss(), live, eps=1e-5)
        assert err < 1e-4

        # and through the real loss, the p/fn pathways get exactly zero
        with ad.Tape():
            out, _ = forward_batch(params, scaler, samples, cfg.k)
            loss, _ = debias_loss(out, labels, RatioMode.EXACT)
            ad.backward(loss)
        for name in aux_names:
            for t in params.heads[name]:
                assert t.grad is None or not np.any(t.grad)


class TestOfflinePretrain:
    def offline_clicks(self, n=10):
        # 3 of 10 convert between the windows (fake negatives), rest never
        clicks = []
        for sid in range(n):
            conv = sid * 100.0 + 2 * H if sid < 3 else None
            clicks.append(
                ClickSample(sid, sid % 3, sid % 3, sid * 100.0, conv, (0.5, 0.5), (0,), (0.5, 0.5), (0,))
            )
        return clicks

    def test_empty_split_rejected(self):
        params, scaler, g = toy_world()
        with pytest.raises(ConfigError, match="empty"):
            offline_pretrain(params, scaler, g, [], TrainConfig())

    def test_loss_decreases(self):
        params, scaler, g = toy_world(seed=7)
        clicks = self.offline_clicks()
        cfg = TrainConfig(learning_rate=0.05, optimizer="adam", offline_epochs=5, k=1, seed=2)

        def mean_loss():
            samples = [sample_for_pair(g, s, cfg.k, s.click_time) for s in clicks]
            out, _ = forward_batch(params, scaler, samples, cfg.k)
            delays = np.array([s.delay for s in clicks])
            cvr_t = (delays <= cfg.attribution_len).astype(float)
            from dgdf.training import _bce_sum

            loss, _ = _bce_sum(out.y_cvr, cvr_t)
            return loss.item() / len(clicks)

        before = mean_loss()
        offline_pretrain(params, scaler, g, clicks, cfg)
        assert mean_loss() < before

    def test_fn_head_converges_to_base_rate(self):
        # indistinguishable inputs: the fn head's MLE is the fake-negative share
        params, scaler, g = toy_world(seed=8)
        clicks = []
        for sid in range(10):
            conv = 500.0 + 2 * H if sid < 3 else None
            clicks.append(
                ClickSample(sid, 0, 0, 500.0, conv, (0.5, 0.5), (0,), (0.5, 0.5), (0,))
            )
        cfg = TrainConfig(
            learning_rate=0.05, optimizer="adam", offline_epochs=300, k=1, seed=3
        )
        offline_pretrain(params, scaler, g, clicks, cfg)
        samples = [sample_for_pair(g, s, cfg.k, s.click_time) for s in clicks]
        out, _ = forward_batch(params, scaler, samples, cfg.k)
        assert abs(out.y_fn.values.mean() - 0.3) < 0.02

    def test_deterministic(self):
        results = []
        for _ in range(2):
            params, scaler, g = toy_world(seed=9)
            cfg = TrainConfig(offline_epochs=2, k=1, seed=4)
            offline_pretrain(params, scaler, g, self.offline_clicks(), cfg)
            results.append(params.heads["cvr"][0].values.copy())
        np.testing.assert_array_equal(results[0], results[1])


class TestDistributionOracle:
    def random_dist(self, rng, n=6):
        mass = rng.dirichlet(np.ones(n))
        return SyntheticDistribution(
            p1=rng.uniform(0.01, 0.9, n), q=rng.uniform(0.0, 0.95, n), mass=mass
        )

    def test_exact_mode_closes_gap(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            dist = self.random_dist(rng)
            scores = rng.uniform(0.02, 0.98, dist.p1.shape)
            report = distribution_oracle(dist, RatioMode.EXACT, scores)
            assert report.gap < 1e-12

    def test_paper_mode_has_positive_gap(self):
        dist = SyntheticDistribution(p1=np.array([0.4]), q=np.array([0.5]), mass=np.array([1.0]))
        scores = np.array([0.3])
        report = distribution_oracle(dist, RatioMode.PAPER, scores)
        assert report.gap > 1e-4

    def test_no_fake_negatives_no_gap_in_exact_mode(self):
        # q = 0 leaves the stream undistorted; EXACT weights collapse to 1.
        # The published negative weight still carries its (1 - y_p) factor, so
        # a residual gap remains there whenever conversions exist at all.
        dist = SyntheticDistribution(
            p1=np.array([0.2, 0.6]), q=np.zeros(2), mass=np.array([0.5, 0.5])
        )
        scores = np.array([0.4, 0.7])
        assert distribution_oracle(dist, RatioMode.EXACT, scores).gap < 1e-14
        assert distribution_oracle(dist, RatioMode.PAPER, scores).gap > 0

    def test_degenerate_no_conversions_no_gap_both_modes(self):
        dist = SyntheticDistribution(
            p1=np.zeros(2), q=np.array([0.3, 0.0]), mass=np.array([0.5, 0.5])
        )
        scores = np.array([0.4, 0.7])
        for mode in RatioMode:
            assert distribution_oracle(dist, mode, scores).gap < 1e-14

    def test_validates_inputs(self):
        with pytest.raises(ConfigError, match="sum to 1"):
            SyntheticDistribution(p1=np.array([0.5]), q=np.array([0.5]), mass=np.array([0.8]))
        dist = SyntheticDistribution(p1=np.array([0.5]), q=np.array([0.5]), mass=np.array([1.0]))
        with pytest.raises(ConfigError, match="scores"):
            distribution_oracle(dist, RatioMode.EXACT, np.array([1.5]))


class TestOptimizers:
    def test_sgd_step(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        t.grad = np.array([0.5, -0.5])
        SGD([t], lr=0.1).step()
        np.testing.assert_allclose(t.values, [0.95, 2.05])
        assert t.grad is None

    def test_adam_converges_on_quadratic(self):
        t = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam([t], lr=0.5)
        for _ in range(200):
            t.grad = 2.0 * (t.values - 3.0)
            opt.step()
        assert abs(t.values[0] - 3.0) < 1e-3

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="momentum")
        cfg = TrainConfig(ratio_mode="paper")
        assert cfg.ratio_mode is RatioMode.PAPER
