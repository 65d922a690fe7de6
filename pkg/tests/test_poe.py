"""Fusion head, expert heads, log-space combination, training, inference."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poefuse.datamodel import FeatureRecord
from poefuse.nn import Adam, DenseNet, Layer, log_softmax, log_softmax_backward, nll_loss
from poefuse.poe import (
    ModelBundle,
    PoEConfig,
    _stack,
    build_bundle,
    classification_loss_and_grads,
    concat_features,
    expert_forward,
    load_bundle,
    multi_forward,
    poe_combine,
    predict,
    predict_batch,
    save_bundle,
    train_classification,
    train_regression,
)
from poefuse.synthbench import generate_linear_regression_dataset, generate_separable_dataset

LN3 = 1.0986122886681098


def record(speech, text, acoustic, label="mci", mmse=25.0, sid="r0"):
    return FeatureRecord(sample_id=sid, participant_id=sid, language="en",
                         gender="f", age=70.0, label=label, mmse=mmse,
                         speech_vec=np.asarray(speech, dtype=float),
                         text_vec=np.asarray(text, dtype=float),
                         acoustic_vec=np.asarray(acoustic, dtype=float))


def linear_bundle(d_s=2, d_t=2, d_a=2, seed=0):
    return build_bundle(d_s, d_t, d_a, hidden_dim=0, seed=seed)


class TestForwardPaths:
    def test_zero_weight_multi_head(self):
        b = linear_bundle()
        for layer in b.ffn_m.layers:
            layer.weight[:] = 0.0
        z = multi_forward(b, record([1, 2], [3, 4], [5, 6]))
        assert np.array_equal(z, [0.0, 0.0])

    def test_concatenation_order_is_speech_text_acoustic(self):
        b = linear_bundle()
        W = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                      [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]])
        b.ffn_m.layers[0].weight = W
        b.ffn_m.layers[0].bias = np.zeros(2)
        rec = record([1, 0], [0, 2], [1, 1])
        z = multi_forward(b, rec)
        # independent evaluation of the same affine map
        x = np.concatenate([rec.speech_vec, rec.text_vec, rec.acoustic_vec])
        assert np.array_equal(z, W @ x)
        # permuting modality blocks changes the output of this asymmetric map
        swapped = record([0, 2], [1, 0], [1, 1])
        assert not np.array_equal(multi_forward(b, swapped), z)

    def test_summing_layer_gives_row_sums_of_concat(self):
        b = linear_bundle()
        b.ffn_m.layers[0].weight = np.ones((2, 6))
        b.ffn_m.layers[0].bias = np.zeros(2)
        rec = record([0.5, 1.5], [-2.0, 0.25], [4.0, -1.0])
        total = 0.5 + 1.5 - 2.0 + 0.25 + 4.0 - 1.0
        assert np.allclose(multi_forward(b, rec), [total, total], atol=1e-12)

    def test_record_dims_must_match_bundle(self):
        b = build_bundle(3, 2, 2, hidden_dim=4, seed=0)
        bad = record([1.0, 2.0], [0.0, 1.0], [0.0, 1.0])  # d_s=2, bundle wants 3
        with pytest.raises(ValueError, match="dim mismatch"):
            multi_forward(b, bad)
        cfg = PoEConfig(epochs=1)
        with pytest.raises(ValueError, match="dims"):
            train_classification(b, [bad, record([1, 2], [3, 4], [5, 6],
                                                 label="nc", sid="r1")], cfg)

    def test_expert_ignores_other_modalities(self):
        b = build_bundle(3, 2, 2, hidden_dim=4, seed=1)
        rec_a = record([1, 2, 3], [0.5, -0.5], [0, 0])
        rec_b = record([9, -9, 4], [0.5, -0.5], [0, 0])
        za = expert_forward(b, rec_a, "t")
        zb = expert_forward(b, rec_b, "t")
        assert za.tobytes() == zb.tobytes()

    def test_linear_text_expert_identity_weights(self):
        b = linear_bundle()
        b.ffn_t.layers[0].weight = np.eye(2)
        b.ffn_t.layers[0].bias = np.zeros(2)
        z = expert_forward(b, record([0, 0], [LN3, 0.0], [0, 0]), "t")
        assert np.allclose(z, [LN3, 0.0], atol=1e-15)

    def test_disabled_expert_request_rejected(self):
        b = linear_bundle()
        cfg = PoEConfig(experts_enabled=("s",))
        with pytest.raises(ValueError, match="disabled"):
            expert_forward(b, record([0, 0], [0, 0], [0, 0]), "t", config=cfg)


class TestPoECombine:
    def test_uniform_multi_is_neutral(self):
        out = poe_combine(np.log([0.5, 0.5]), [np.log([0.75, 0.25])])
        assert np.allclose(np.exp(out), [0.75, 0.25], atol=1e-12)

    def test_two_head_product(self):
        out = poe_combine(np.log([0.8, 0.2]), [np.log([0.6, 0.4])])
        assert np.allclose(np.exp(out), [6.0 / 7.0, 1.0 / 7.0], atol=1e-12)

    def test_empty_expert_set_is_exactly_log_softmax(self):
        z = np.array([0.37, -2.11])
        assert poe_combine(z, []).tobytes() == log_softmax(z).tobytes()

    @given(st.lists(st.lists(st.floats(-30, 30), min_size=2, max_size=2),
                    min_size=1, max_size=4))
    @settings(max_examples=150, deadline=None)
    def test_matches_probability_space_product(self, logit_rows):
        logits = [np.array(row) for row in logit_rows]
        out = np.exp(poe_combine(logits[0], logits[1:]))
        # oracle: renormalized element-wise product of the distributions
        probs = np.ones(2)
        for z in logits:
            e = np.exp(z - z.max())
            probs = probs * (e / e.sum())
        oracle = probs / probs.sum()
        assert np.allclose(out, oracle, atol=1e-12)
        assert abs(np.exp(poe_combine(logits[0], logits[1:])).sum() - 1.0) < 1e-9

    @given(st.lists(st.lists(st.floats(-20, 20), min_size=2, max_size=2),
                    min_size=2, max_size=4), st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_commutative_over_experts(self, logit_rows, rnd):
        logits = [np.array(row) for row in logit_rows]
        base = poe_combine(logits[0], logits[1:])
        shuffled = logits[1:]
        rnd.shuffle(shuffled)
        assert np.allclose(poe_combine(logits[0], shuffled), base, atol=1e-12)

    def test_associative_staged_combination(self):
        zm, zs, zt = np.array([1.0, -0.5]), np.array([0.3, 0.9]), np.array([-2.0, 0.1])
        flat = poe_combine(zm, [zs, zt])
        staged = poe_combine(poe_combine(zm, [zs]), [zt])
        assert np.allclose(flat, staged, atol=1e-12)

    def test_uniform_expert_leaves_distribution_unchanged(self):
        zm, zs = np.array([0.7, -1.2]), np.array([2.0, 0.4])
        with_uniform = poe_combine(zm, [zs, np.array([3.3, 3.3])])
        without = poe_combine(zm, [zs])
        assert np.allclose(with_uniform, without, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            poe_combine(np.array([np.inf, 0.0]), [])


class TestLossReweighting:
    def test_nll_strictly_decreases_in_expert_confidence(self):
        # fixed fused-head distribution, label 0; sweep the expert's
        # probability of the label across a 99-point grid
        for pm in (0.3, 0.5, 0.7, 0.9):
            losses = []
            for g in np.linspace(0.01, 0.99, 99):
                combined = poe_combine(np.log([pm, 1 - pm]), [np.log([g, 1 - g])])
                losses.append(nll_loss(combined, 0))
            diffs = np.diff(losses)
            assert np.all(diffs < 0), f"violations at pm={pm}"


class TestStopGradient:
    def test_multi_gradient_identical_with_frozen_experts(self):
        rng = np.random.default_rng(5)
        bundle = build_bundle(3, 2, 2, hidden_dim=4, seed=11)
        recs = [record(rng.standard_normal(3), rng.standard_normal(2),
                       rng.standard_normal(2), label="mci" if i % 2 else "nc",
                       sid=f"r{i}") for i in range(8)]
        batch = _stack(recs, bundle, need_labels=True)
        experts = ("s", "t", "a")
        loss_live, grads_live = classification_loss_and_grads(bundle, batch, experts)
        frozen = {}
        for mod in experts:
            z, _ = bundle.expert(mod).forward(
                {"s": batch.xs, "t": batch.xt, "a": batch.xa}[mod])
            frozen[mod] = log_softmax(z)
        loss_frozen, grads_frozen = classification_loss_and_grads(
            bundle, batch, experts, expert_logdists=frozen)
        assert loss_live == loss_frozen
        for a, b in zip(grads_live["m"], grads_frozen["m"]):
            assert a.tobytes() == b.tobytes()
        assert set(grads_frozen) == {"m"}  # frozen experts receive nothing


class TestTraining:
    def _toy_config(self, **kw):
        base = dict(experts_enabled=("s", "t", "a"), epochs=10, lr=1e-2,
                    weight_decay=0.0, batch_size=16, hidden_dim=8, seed=3)
        base.update(kw)
        return PoEConfig(**base)

    def test_loss_decreases_on_separable_data(self):
        manifest = generate_separable_dataset(n=200, seed=2)
        bundle = build_bundle(4, 3, 3, hidden_dim=8, seed=3)
        result = train_classification(bundle, list(manifest.records),
                                      self._toy_config())
        drops = np.diff(result.epoch_losses)
        assert np.sum(drops < 0) >= 8

    def test_single_class_rejected(self):
        manifest = generate_separable_dataset(n=20, seed=0)
        only_mci = [r for r in manifest.records if r.label == "mci"]
        bundle = build_bundle(4, 3, 3, hidden_dim=4, seed=0)
        with pytest.raises(ValueError, match="single class"):
            train_classification(bundle, only_mci, self._toy_config())

    def test_no_experts_matches_plain_cross_entropy_loop(self):
        manifest = generate_separable_dataset(n=64, seed=4)
        records = list(manifest.records)
        cfg = self._toy_config(experts_enabled=(), epochs=3, weight_decay=0.01)

        trained = build_bundle(4, 3, 3, hidden_dim=8, seed=cfg.seed)
        train_classification(trained, records, cfg)

        # independent plain cross-entropy loop over the fused head
        reference = build_bundle(4, 3, 3, hidden_dim=8, seed=cfg.seed)
        net = reference.ffn_m
        xcat = np.stack([concat_features(r) for r in records])
        y = np.array([0 if r.label == "mci" else 1 for r in records])
        opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)
        n = len(records)
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                z, tape = net.forward(xcat[idx])
                onehot = np.zeros_like(z)
                onehot[np.arange(len(idx)), y[idx]] = 1.0
                gz = log_softmax_backward(z, -onehot / len(idx))
                grads, _ = net.backward(tape, gz)
                opt.step(net.parameters(), grads)

        for a, b in zip(trained.ffn_m.parameters(), net.parameters()):
            assert a.tobytes() == b.tobytes()

    def test_training_is_deterministic(self):
        manifest = generate_separable_dataset(n=48, seed=5)
        records = list(manifest.records)
        cfg = self._toy_config(epochs=2)
        outs = []
        for _ in range(2):
            bundle = build_bundle(4, 3, 3, hidden_dim=8, seed=9)
            train_classification(bundle, records, cfg)
            outs.append(b"".join(p.tobytes() for p in bundle.ffn_m.parameters()))
        assert outs[0] == outs[1]

    def test_regression_constant_target_converges(self):
        manifest = generate_linear_regression_dataset(n=60, seed=6)
        records = [FeatureRecord(**{**r.__dict__, "mmse": 28.0})
                   for r in manifest.records]
        bundle = build_bundle(4, 3, 3, hidden_dim=0, seed=1)
        # full-batch, high toy rate: the intercept has ~28 units to travel
        cfg = self._toy_config(task="regression", lr=0.2, epochs=500,
                               batch_size=60)
        train_regression(bundle, records, cfg)
        preds = predict_batch(bundle, records, task="regression")
        rmse = float(np.sqrt(np.mean((preds - 28.0) ** 2)))
        assert rmse < 0.05
        assert abs(preds.mean() - 28.0) < 0.1

    def test_regression_linear_targets_near_exact(self):
        manifest = generate_linear_regression_dataset(n=120, seed=7)
        records = list(manifest.records)
        bundle = build_bundle(4, 3, 3, hidden_dim=0, seed=2)
        cfg = self._toy_config(task="regression", lr=0.2, epochs=500,
                               batch_size=120)
        train_regression(bundle, records, cfg)
        preds = predict_batch(bundle, records, task="regression")
        targets = np.array([r.mmse for r in records])
        assert float(np.sqrt(np.mean((preds - targets) ** 2))) < 0.1

    def test_zero_init_regression_head_predicts_zero(self):
        bundle = build_bundle(2, 2, 2, hidden_dim=0, seed=0)
        bundle.reg_head.layers[0].weight[:] = 0.0
        rec = record([1, 2], [3, 4], [5, 6], mmse=27.0)
        assert predict(bundle, rec, task="regression") == 0.0

    def test_poe_regression_flag_rejected(self):
        with pytest.raises(ValueError, match="regression"):
            PoEConfig(regression_uses_poe=True)


class TestGradientsThroughCombination:
    def _numeric_gradient(self, bundle, batch, experts, params, h=1e-6):
        def loss_value():
            loss, _ = classification_loss_and_grads(bundle, batch, experts)
            return loss
        numeric = []
        for p in params:
            flat = p.reshape(-1)
            g = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                g[i] = (up - down) / (2 * h)
            numeric.append(g.reshape(p.shape))
        return numeric

    def test_all_heads_pass_finite_difference_check(self):
        rng = np.random.default_rng(13)
        bundle = build_bundle(3, 2, 2, hidden_dim=3, seed=21)
        recs = [record(rng.standard_normal(3), rng.standard_normal(2),
                       rng.standard_normal(2), label="mci" if i % 2 else "nc",
                       sid=f"g{i}") for i in range(6)]
        batch = _stack(recs, bundle, need_labels=True)
        experts = ("s", "t", "a")
        _, grads = classification_loss_and_grads(bundle, batch, experts)
        for mod, net in (("m", bundle.ffn_m), ("s", bundle.ffn_s),
                         ("t", bundle.ffn_t), ("a", bundle.ffn_a)):
            numeric = self._numeric_gradient(bundle, batch, experts, net.parameters())
            worst = max(np.max(np.abs(a - n)) for a, n in zip(grads[mod], numeric))
            scale = max(max(np.max(np.abs(a)) for a in grads[mod]), 1e-12)
            assert worst / scale < 1e-6, f"head {mod}"


class TestPredict:
    def test_uniform_logits_give_even_probabilities(self):
        b = linear_bundle()
        for layer in b.ffn_m.layers:
            layer.weight[:] = 0.0
        probs = predict(b, record([1, 1], [1, 1], [1, 1]))
        assert np.allclose(probs, [0.5, 0.5], atol=1e-15)

    def test_three_to_one_logits(self):
        b = linear_bundle()
        b.ffn_m.layers[0].weight[:] = 0.0
        b.ffn_m.layers[0].bias = np.array([LN3, 0.0])
        probs = predict(b, record([0, 0], [0, 0], [0, 0]))
        assert np.allclose(probs, [0.75, 0.25], atol=1e-12)
        assert int(np.argmax(probs)) == 0

    def test_expert_mutation_does_not_change_predictions(self):
        bundle = build_bundle(3, 2, 2, hidden_dim=4, seed=17)
        rec = record([0.1, 0.2, 0.3], [1.0, -1.0], [0.5, 0.5])
        before = predict(bundle, rec)
        for net in (bundle.ffn_s, bundle.ffn_t, bundle.ffn_a):
            for layer in net.layers:
                layer.weight[:] = 123.0
                layer.bias[:] = -7.0
        after = predict(bundle, rec)
        assert before.tobytes() == after.tobytes()

    def test_regression_clamp(self):
        bundle = build_bundle(2, 2, 2, hidden_dim=0, seed=0)
        bundle.reg_head.layers[0].weight[:] = 0.0
        bundle.reg_head.layers[0].bias = np.array([99.0])
        rec = record([0, 0], [0, 0], [0, 0])
        assert predict(bundle, rec, task="regression") == 99.0
        assert predict(bundle, rec, task="regression", clamp_regression=True) == 30.0


class TestBundleCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        bundle = build_bundle(3, 2, 2, hidden_dim=4, seed=23)
        save_bundle(tmp_path / "model", bundle, seed=23)
        loaded = load_bundle(tmp_path / "model")
        assert (loaded.d_s, loaded.d_t, loaded.d_a) == (3, 2, 2)
        rec = record([0.4, -0.4, 1.0], [1.0, 0.0], [0.0, 1.0])
        a = predict(bundle, rec)
        b = predict(loaded, rec)
        assert np.allclose(a, b, atol=1e-6)  # float32 storage rounding
