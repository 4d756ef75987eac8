import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chipnet import ndgrad
from chipnet.budgets import budget, channel_budget
from chipnet.datakit import load_checkpoint, save_checkpoint, split_and_batch, synth_blobs
from chipnet.models import HardMask, build_model
from chipnet.ndgrad import Tensor
from chipnet.projections import crispness_loss, heaviside, logistic
from chipnet.pruner import (InfeasibleBudgetError, Optimizer, PruneConfig, TrainConfig, adamw_step, chipnet_loss,
                            finetune, hard_prune, net_checkpoint, net_from_checkpoint, sgd_momentum_step, soft_prune,
                            train_plain, transfer_mask)

from oracles import random_shape, topk_mask
from test_budgets import chain

KINDS = ("channel", "volume", "parameter", "flops")


@functools.lru_cache(maxsize=None)
def small_data(classes=4):
    return split_and_batch(synth_blobs(classes, 20, 8, 0.1, seed=0), 0.25, 8, seed=0)


def small_net(classes=4, seed=0):
    return build_model("tiny-cnn", widths=(4, 4, 4, 4), input_shape=(1, 8, 8), num_classes=classes, seed=seed)


@functools.lru_cache(maxsize=None)
def small_pretrained():
    ckpt, _ = train_plain(small_net(), small_data(), TrainConfig(epochs=2))
    return ckpt


def rows(records):
    return [repr(r.row()) for r in records]


def prefix_scan(z, kind, target, shape):
    """Longest feasible prefix of the (z desc, index asc) ranking, by trying every length."""
    order = sorted(range(len(z)), key=lambda i: (-z[i], i))
    best = None
    for k in range(len(z) + 1):
        bits = np.zeros(len(z))
        bits[order[:k]] = 1
        if budget(kind, bits, shape) <= target:
            best = bits
    return best, order


class TestSgd:
    def test_zero_grad_unchanged(self):
        w = [np.array([1.5, -2.0])]
        new, _ = sgd_momentum_step(w, [np.zeros(2)], {}, lr=0.1)
        np.testing.assert_array_equal(new[0], w[0])

    def test_first_step(self):
        w, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
        new, state = sgd_momentum_step([w], [g], {}, lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(new[0], w - 0.1 * (g + 0.01 * w), rtol=1e-15)
        np.testing.assert_allclose(state["velocity"][0], g + 0.01 * w, rtol=1e-15)

    def test_two_steps_on_quadratic(self):
        a, lr, mu, wd = 3.0, 0.05, 0.9, 1e-3
        w, v = 2.0, 0.0
        params, state = [np.array([2.0])], {}
        for _ in range(2):
            g = a * w
            v = mu * v + g + wd * w
            w = w - lr * v
            params, state = sgd_momentum_step(params, [a * params[0]], state, lr, mu, wd)
        assert abs(params[0][0] - w) < 1e-7


class TestAdamW:
    def test_zero_grad_unchanged(self):
        w = [np.array([0.3, -4.0])]
        new, _ = adamw_step(w, [np.zeros(2)], {}, lr=1e-3)
        np.testing.assert_array_equal(new[0], w[0])

    def test_decay_mask_bypass(self):
        w = [np.array([2.0]), np.array([2.0])]
        new, _ = adamw_step(w, [np.zeros(1), np.zeros(1)], {}, lr=0.1, weight_decay=0.5, decay_mask=[True, False])
        assert new[0][0] < 2.0
        assert new[1][0] == 2.0

    def test_five_steps_on_quadratic(self):
        a, lr, (b1, b2), eps, wd = 2.0, 1e-2, (0.9, 0.999), 1e-8, 1e-3
        w, m, v = 1.5, 0.0, 0.0
        params, state = [np.array([1.5])], {}
        for t in range(1, 6):
            g = a * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * wd)
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            params, state = adamw_step(params, [a * params[0]], state, lr, (b1, b2), eps, wd)
        assert abs(params[0][0] - w) < 1e-6
        assert state["step"] == 5

    def test_per_parameter_rates(self):
        w = [np.array([1.0]), np.array([1.0])]
        new, _ = adamw_step(w, [np.ones(1), np.ones(1)], {}, lr=[0.1, 0.01])
        np.testing.assert_allclose([1 - new[0][0], 1 - new[1][0]], [0.1, 0.01], rtol=1e-6)


class TestOptimizer:
    @pytest.mark.parametrize("order", [("w", "psi"), ("psi", "w"), ("a", "psi", "b")])
    def test_no_decay_applies_to_named_params(self, order):
        params = {n: Tensor(np.ones(3), requires_grad=True) for n in order}
        opt = Optimizer(params, "adamw", lr=0.1, weight_decay=0.5, no_decay=("psi",))
        opt.step()
        for n, t in params.items():
            if n == "psi":
                np.testing.assert_array_equal(t.data, 1.0)
            else:
                assert np.all(t.data < 1.0)

    def test_lr_override(self):
        t = Tensor(np.ones(2), requires_grad=True)
        t.grad = np.ones(2, np.float32)
        opt = Optimizer({"w": t}, "sgd", lr=1.0, momentum=0.0)
        opt.step(lr=0.25)
        np.testing.assert_allclose(t.data, 0.75)

    def test_state_roundtrip(self):
        params = {"w": Tensor(np.ones(2), requires_grad=True), "psi": Tensor(np.zeros(3), requires_grad=True)}
        opt = Optimizer(params, "adamw", lr=0.1)
        for t in params.values():
            t.grad = np.full(t.shape, 0.5, np.float32)
        opt.step()
        other = Optimizer(params, "adamw", lr=0.1)
        other.load_state_arrays(opt.state_arrays("opt"), "opt", opt.state["step"])
        for key in ("m", "v"):
            for a, b in zip(opt.state[key], other.state[key]):
                np.testing.assert_array_equal(a, b)
        assert other.state["step"] == 1


class TestLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.psi = rng.normal(size=6)
        self.logits = rng.normal(size=(4, 3))
        self.labels = np.array([0, 2, 1, 1])
        self.shape = chain(2, 4)

    def parts(self):
        psi = Tensor(self.psi, requires_grad=True, dtype=np.float64)
        logits = Tensor(self.logits, requires_grad=True, dtype=np.float64)
        zt = logistic(psi, 1.3)
        z = heaviside(zt, 4.0)
        return psi, logits, zt, z, channel_budget(z, self.shape)

    def test_plain_cross_entropy_when_weights_zero(self):
        psi, logits, zt, z, V = self.parts()
        total, _ = chipnet_loss(V, 0.5, zt, z, logits, self.labels, 0.0, 0.0)
        assert float(total.data) == float(ndgrad.softmax_cross_entropy(logits, self.labels).data)

    def test_vanishes_when_ideal(self):
        logits = Tensor(np.array([[50.0, 0.0], [0.0, 50.0]]))
        z = np.array([1.0, 0.0, 1.0, 0.0])
        V = channel_budget(z, chain(4))
        total, parts = chipnet_loss(V, 0.5, z, z, logits, [0, 1])
        assert float(total.data) < 1e-12
        assert parts["crisp"] == 0.0 and parts["budget"] == 0.0

    def test_decomposition(self):
        _, logits, zt, z, V = self.parts()
        total, parts = chipnet_loss(V, 0.3, zt, z, logits, self.labels, 10.0, 30.0)
        assert float(total.data) == pytest.approx(parts["ce"] + 10 * parts["crisp"] + 30 * parts["budget"],
                                                  abs=1e-6)

    def test_gradient_is_sum_of_component_gradients(self):
        psi, logits, zt, z, V = self.parts()
        total, _ = chipnet_loss(V, 0.3, zt, z, logits, self.labels, 10.0, 30.0)
        total.backward()
        full = np.concatenate([psi.grad, logits.grad.ravel()])
        summed = np.zeros_like(full)
        for term in ("ce", "crisp", "budget"):
            psi, logits, zt, z, V = self.parts()
            if term == "ce":
                loss = ndgrad.softmax_cross_entropy(logits, self.labels)
                ndgrad.backward(ndgrad.add(loss, ndgrad.mul(ndgrad.tsum(psi), 0.0)))
            elif term == "crisp":
                ndgrad.backward(ndgrad.add(ndgrad.mul(crispness_loss(zt, z), 10.0),
                                           ndgrad.mul(ndgrad.tsum(logits), 0.0)))
            else:
                d = ndgrad.sub(V, 0.3)
                ndgrad.backward(ndgrad.add(ndgrad.mul(ndgrad.mul(d, d), 30.0), ndgrad.mul(ndgrad.tsum(logits), 0.0)))
            summed += np.concatenate([psi.grad, logits.grad.ravel()])
        np.testing.assert_allclose(full, summed, atol=1e-6)


class TestLrSchedule:
    @pytest.mark.parametrize("epoch, factor", [(0, 1.0), (29, 1.0), (30, 0.5), (59, 0.5), (60, 0.25)])
    def test_step_decay(self, epoch, factor):
        assert TrainConfig(lr=0.05).lr_at(epoch) == pytest.approx(0.05 * factor)


class TestHardPrune:
    def test_reference_example(self):
        mask = hard_prune(np.array([0.9, 0.7, 0.2, 0.1]), "channel", 0.5, chain(4))
        np.testing.assert_array_equal(mask.bits, [1, 1, 0, 0])

    @pytest.mark.parametrize("kind", KINDS)
    def test_all_kept_at_full_budget(self, kind):
        shape = chain(3, 4, 2)
        assert hard_prune(np.ones(9), kind, 1.0, shape).bits.all()

    @pytest.mark.parametrize("seed", range(100))
    def test_channel_matches_top_k(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng)
        z = np.round(rng.random(shape.mask_count), 1)  # coarse values force ties
        target = float(rng.uniform(0.05, 1.0))
        fixed = shape.total_channels - shape.mask_count
        k = min(math.floor(target * shape.total_channels + 1e-9) - fixed, shape.mask_count)
        if k < 1:
            with pytest.raises(InfeasibleBudgetError):
                hard_prune(z, "channel", target, shape)
            return
        np.testing.assert_array_equal(hard_prune(z, "channel", target, shape).bits, topk_mask(z, k))

    @pytest.mark.parametrize("kind", ["volume", "parameter", "flops"])
    @pytest.mark.parametrize("seed", range(25))
    def test_matches_exhaustive_scan(self, kind, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng, max_layers=3, max_channels=6)
        z = rng.random(shape.mask_count)
        target = float(rng.uniform(0.1, 1.0))
        expected, order = prefix_scan(z, kind, target, shape)
        if expected is None or not expected.any():
            with pytest.raises(InfeasibleBudgetError):
                hard_prune(z, kind, target, shape)
            return
        bits = hard_prune(z, kind, target, shape).bits
        np.testing.assert_array_equal(bits, expected)
        assert budget(kind, bits.astype(float), shape) <= target
        excluded = [i for i in order if not bits[i]]
        if excluded:
            promoted = bits.astype(float)
            promoted[excluded[0]] = 1
            assert budget(kind, promoted, shape) > target

    @settings(max_examples=50)
    @given(seed=st.integers(0, 2**32 - 1), target=st.floats(0.3, 1.0))
    def test_channel_granularity(self, seed, target):
        rng = np.random.default_rng(seed)
        shape = chain(*rng.integers(1, 9, size=3))
        mask = hard_prune(rng.random(shape.mask_count), "channel", target, shape)
        v = channel_budget(mask.bits, shape)
        assert target - 1 / shape.total_channels - 1e-12 <= v <= target

    def test_below_granularity(self):
        with pytest.raises(InfeasibleBudgetError, match="minimum feasible"):
            hard_prune(np.ones(8), "parameter", 1e-4, chain(4, 4))

    def test_size_checked(self):
        with pytest.raises(ValueError, match="prunable channels"):
            hard_prune(np.ones(3), "channel", 0.5, chain(4))

    def test_tiebreak_orders_saturated_values(self):
        mask = hard_prune(np.ones(4), "channel", 0.5, chain(4), tiebreak=np.array([0.1, 3.0, 2.0, -1.0]))
        np.testing.assert_array_equal(mask.bits, [0, 1, 1, 0])

    def test_deterministic(self):
        z = np.random.default_rng(1).random(20)
        shape = chain(5, 5, 10)
        assert hard_prune(z, "flops", 0.4, shape) == hard_prune(z, "flops", 0.4, shape)


class TestPruneConfig:
    @pytest.mark.parametrize("kwargs", [dict(target=0.0), dict(target=1.5), dict(budget_kind="latency"),
                                        dict(epochs=-1), dict(budget_on="zz"), dict(psi_init=(1.0, -1.0))])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            PruneConfig(**kwargs)

    def test_defaults(self):
        cfg = PruneConfig()
        assert (cfg.alpha1, cfg.alpha2, cfg.lr, cfg.weight_decay) == (10.0, 30.0, 1e-3, 1e-3)
        state = cfg.continuation()
        assert (state.beta, state.gamma) == (1.0, 2.0)

    def test_schedule_overrides(self):
        state = PruneConfig(schedule="grid", gamma_double_every=4).continuation()
        assert (state.beta_step, state.beta_every, state.gamma_double_every) == (0.1, 5, 4)


class TestTrainPlain:
    def test_zero_epochs(self):
        net = small_net()
        before = {k: v.copy() for k, v in net.state_arrays().items()}
        ckpt, records = train_plain(net, small_data(), TrainConfig(epochs=0))
        assert records == [] and ckpt.best == {}
        for k, v in net.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_returns_best_epoch(self):
        ckpt, records = train_plain(small_net(), small_data(), TrainConfig(epochs=3))
        accs = [r.val_acc for r in records]
        assert ckpt.best["val_acc"] == max(accs)
        assert ckpt.best["epoch"] == max(i for i, a in enumerate(accs) if a == max(accs))

    def test_deterministic(self):
        a = train_plain(small_net(), small_data(), TrainConfig(epochs=2))[1]
        b = train_plain(small_net(), small_data(), TrainConfig(epochs=2))[1]
        assert rows(a) == rows(b)


class TestSoftPrune:
    def run(self, **kwargs):
        net = net_from_checkpoint(small_pretrained())
        cfg = PruneConfig(**{"epochs": 4, "target": 0.5, **kwargs})
        return net, soft_prune(net, small_data(), cfg)

    def test_zero_epochs_keeps_weights(self):
        pre = small_pretrained()
        net, (ckpt, records) = self.run(epochs=0)
        assert records == []
        for k, v in pre.arrays.items():
            if k != "psi":
                np.testing.assert_array_equal(ckpt.arrays[k], v)
        assert ckpt.arrays["mask"].all()

    def test_deterministic(self):
        _, (a, ra) = self.run()
        _, (b, rb) = self.run()
        assert rows(ra) == rows(rb)
        np.testing.assert_array_equal(a.arrays["final.psi"], b.arrays["final.psi"])

    def test_resume_equivalence(self, tmp_path):
        _, (full, full_records) = self.run()
        net = net_from_checkpoint(small_pretrained())
        cfg = PruneConfig(epochs=4, target=0.5)
        partial, first = soft_prune(net, small_data(), cfg, stop_after=2)
        assert partial.meta["partial"] and len(first) == 2
        save_checkpoint(partial, tmp_path / "mid.ckpt")
        loaded = load_checkpoint(tmp_path / "mid.ckpt")
        resumed_net = net_from_checkpoint(small_pretrained())
        ckpt, records = soft_prune(resumed_net, small_data(), cfg, resume=loaded)
        assert rows(records) == rows(full_records)
        for k, v in full.arrays.items():
            np.testing.assert_array_equal(ckpt.arrays[k], v, err_msg=k)

    def test_resume_rejects_final_checkpoint(self):
        _, (ckpt, _) = self.run(epochs=1)
        with pytest.raises(ValueError, match="resumable"):
            soft_prune(net_from_checkpoint(small_pretrained()), small_data(), PruneConfig(epochs=2), resume=ckpt)

    def test_selection_is_best_non_fatal_epoch(self):
        _, (ckpt, records) = self.run(epochs=5)
        live = [r for r in records if not r.fatal]
        best = max(r.val_acc for r in live)
        assert ckpt.best["val_acc"] == best
        assert ckpt.best["epoch"] == max(r.epoch for r in live if r.val_acc == best)
        chosen = records[ckpt.best["epoch"]]
        assert int(ckpt.arrays["mask"].sum()) == chosen.kept

    def test_records(self):
        net, (_, records) = self.run()
        p = net.shape.total_channels
        for r in records:
            assert r.loss == pytest.approx(r.loss_ce + 10 * r.loss_c + 30 * r.loss_b, abs=1e-6)
            assert r.budget <= 0.5 + 1 / p
            assert (r.beta, r.gamma) == pytest.approx((1 + 0.02 * r.epoch, 2 * 2 ** (r.epoch // 2)))

    def test_crispness_off_drops_term(self):
        _, (_, records) = self.run(crispness=False, epochs=2)
        for r in records:
            assert r.loss == pytest.approx(r.loss_ce + 30 * r.loss_b, abs=1e-6)

    def test_final_arrays(self):
        net, (ckpt, _) = self.run(epochs=2)
        z = ckpt.arrays["final.z"]
        assert z.shape == (net.shape.mask_count,) and np.all((z >= 0) & (z <= 1))
        assert ckpt.meta["final_continuation"]["epoch"] == 1


class TestFinetuneAndTransfer:
    def host(self, target):
        net = net_from_checkpoint(small_pretrained())
        ckpt, _ = soft_prune(net, small_data(), PruneConfig(epochs=2, target=target))
        return ckpt

    def test_finetune_records_mask(self):
        host = self.host(0.5)
        net = net_from_checkpoint(host)
        mask = HardMask(host.arrays["mask"].astype(np.uint8), net.shape.mask_sizes)
        slim, ckpt, records = finetune(net, mask, small_data(), TrainConfig(epochs=1))
        assert slim.slim and len(records) == 1
        assert ckpt.meta["stage"] == "finetune" and ckpt.shape == net.shape
        np.testing.assert_array_equal(ckpt.arrays["mask"], host.arrays["mask"])

    def test_own_architecture_preserves_budget(self):
        host = self.host(0.5)
        target = small_net(seed=5)
        slim = transfer_mask(host, target)
        kept = sum(u.width for u in slim.conv_units())
        assert kept == int(host.arrays["mask"].sum())

    def test_different_head(self):
        net = net_from_checkpoint(small_pretrained())
        keep = np.array([1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0])
        z = 0.9 * keep + 0.05 * np.random.default_rng(0).random(16)
        mask = hard_prune(z, "channel", 0.4, net.shape)
        np.testing.assert_array_equal(mask.bits, keep)
        host = net_checkpoint(net, "prune", extra_arrays={"mask": mask.bits.astype(np.float32)})
        target = small_net(classes=2, seed=3)
        slim = transfer_mask(host, target)
        mask = host.arrays["mask"]
        assert channel_budget(mask, target.shape) == channel_budget(mask, host.shape)
        assert sum(u.width for u in slim.conv_units()) / target.shape.total_channels == pytest.approx(
            channel_budget(mask, host.shape))
        assert channel_budget(mask, host.shape) <= 0.4
        assert slim.predict(np.zeros((2, 1, 8, 8), np.float32)).shape == (2, 2)

    def test_mismatched_widths(self):
        host = self.host(0.5)
        target = build_model("tiny-cnn", widths=(4, 6, 4, 4), input_shape=(1, 8, 8), num_classes=4)
        with pytest.raises(ValueError, match="layer 1"):
            transfer_mask(host, target)

    def test_host_without_mask(self):
        with pytest.raises(ValueError, match="no selected hard mask"):
            transfer_mask(net_checkpoint(small_net(), "train"), small_net())
