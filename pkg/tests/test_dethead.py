import math

import numpy as np
import pytest

from relfuse import dethead
from relfuse.dethead import Adam, DetHead, DetPrediction, TrainConfig, det_loss, render_targets, ta_loss, total_loss
from relfuse.model import Detector, ModelConfig
from relfuse.synthmbu import GeneratorConfig, generate_scene
from relfuse.tensel import Parameter, ShapeError, Tape, Tensor, ops
from relfuse.training import load_checkpoint, save_checkpoint, stack_scenes, train
from relfuse.uta import ConfigError


def pred_from(logits, sizes):
    z = Tensor(np.asarray(logits, dtype=np.float64))
    return DetPrediction(z, ops.sigmoid(z), Tensor(np.asarray(sizes, dtype=np.float64)))


class TestHead:
    def test_zero_init_outputs(self):
        head = DetHead(4, np.random.default_rng(0), zero=True)
        pred = head(Tensor(np.random.default_rng(1).standard_normal((2, 4, 5, 5))))
        assert np.all(pred.heatmap.data == 0.5)
        assert np.all(pred.sizes.data == 0.0)

    def test_batch_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        head = DetHead(3, rng)
        x = rng.standard_normal((4, 3, 6, 6))
        perm = np.array([2, 0, 3, 1])
        a = head(Tensor(x)).heatmap.data[perm]
        b = head(Tensor(x[perm])).heatmap.data
        np.testing.assert_array_equal(a, b)

    def test_sizes_nonnegative_and_heat_bounded(self):
        rng = np.random.default_rng(0)
        head = DetHead(3, rng, size_bias=-1.0)
        pred = head(Tensor(5 * rng.standard_normal((1, 3, 6, 6))))
        assert np.all(pred.sizes.data >= 0)
        assert np.all((pred.heatmap.data > 0) & (pred.heatmap.data < 1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            DetHead(3, np.random.default_rng(0))(Tensor(np.zeros((1, 4, 4, 4))))


class TestTargets:
    def test_peak_on_nearest_cell(self):
        tg = render_targets([[(21.5, 30.0, 8.0, 12.0)]], [(0.0, 0.0)], 16, 16, 4)
        r, c = np.unravel_index(np.argmax(tg.heat[0, 0]), (16, 16))
        assert (r, c) == (round((30.0 - 1.5) / 4), round((21.5 - 1.5) / 4))
        assert tg.heat[0, 0, r, c] == 1.0 and tg.positive.sum() == 1
        np.testing.assert_array_equal(tg.sizes[0, :, r, c], [2.0, 3.0])

    def test_coordinate_roundtrip(self):
        x = np.array([0.0, 1.5, 33.25, 63.0])
        np.testing.assert_allclose(dethead.to_image(dethead.to_feature(x, 4), 4), x)

    def test_shift_in_feature_pixels(self):
        tg = render_targets([[(10.0, 10.0, 8.0, 8.0)]], [(6.0, -2.0)], 16, 16, 4)
        np.testing.assert_array_equal(tg.shift, [[1.5, -0.5]])


class TestDetLoss:
    def test_empty_scene_at_half(self):
        tg = render_targets([[]], [(0.0, 0.0)], 8, 8, 4)
        loss = det_loss(pred_from(np.zeros((1, 1, 8, 8)), np.zeros((1, 2, 8, 8))), tg)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_prediction_hits_entropy_floor(self):
        tg = render_targets([[(20.0, 20.0, 8.0, 10.0)]], [(0.0, 0.0)], 8, 8, 4)
        t = np.clip(tg.heat, 1e-12, 1 - 1e-12)
        logits = np.log(t) - np.log1p(-t)
        loss = det_loss(pred_from(logits, tg.sizes), tg).item()
        entropy = -np.mean(np.where(tg.heat > 0, tg.heat * np.log(t), 0) + np.where(tg.heat < 1, (1 - tg.heat) * np.log1p(-t), 0))
        assert loss == pytest.approx(entropy, abs=1e-9)

    def test_size_term_homogeneous(self):
        tg = render_targets([[(20.0, 20.0, 8.0, 8.0)]], [(0.0, 0.0)], 8, 8, 4)
        z = np.zeros((1, 1, 8, 8))
        base = det_loss(pred_from(z, tg.sizes), tg).item()
        e1 = det_loss(pred_from(z, tg.sizes + 0.3 * tg.positive), tg).item() - base
        e2 = det_loss(pred_from(z, tg.sizes + 0.6 * tg.positive), tg).item() - base
        assert e2 == pytest.approx(2 * e1, abs=1e-12)


class TestTaLoss:
    def _targets(self, shift, cx=20.0):
        return render_targets([[(cx, 20.0, 8.0, 8.0)]], [shift], 8, 8, 4)

    def test_exact_offsets_zero(self):
        tg = self._targets((4.0, -8.0))
        off = np.broadcast_to(tg.shift[:, :, None, None], (1, 2, 8, 8)).copy()
        assert ta_loss(Tensor(off), tg).item() == 0.0

    def test_closed_form(self):
        tg = render_targets([[(20.0, 20.0, 8.0, 8.0)]], [(8.0, 0.0)], 8, 8, 4)
        assert ta_loss(Tensor(np.zeros((1, 2, 8, 8))), tg).item() == pytest.approx(1.0)

    def test_translation_invariant(self):
        a = ta_loss(Tensor(np.zeros((1, 2, 8, 8))), self._targets((4.0, 2.0), cx=12.0)).item()
        b = ta_loss(Tensor(np.zeros((1, 2, 8, 8))), self._targets((4.0, 2.0), cx=20.0)).item()
        assert a == b


class TestTotalLoss:
    def test_arithmetic(self):
        assert total_loss(1.0, 2.0, 3.0, 1.0, 1.0)[1].total == 6.0

    def test_zero_weights(self):
        assert total_loss(1.25, 2.0, 3.0, 0.0, 0.0)[1].total == 1.25

    def test_beta_only_scales_uta(self):
        a = total_loss(1.0, 2.0, 3.0, 1.0, 1.0)[1]
        b = total_loss(1.0, 2.0, 3.0, 1.0, 0.5)[1]
        assert a.total - b.total == pytest.approx(1.5, abs=1e-15)

    def test_recomposes_with_tensors(self):
        parts = [Tensor(np.full((1, 1, 1, 1), v)) for v in (0.3, 0.7, -0.1)]
        t, br = total_loss(*parts, 0.5, 2.0)
        assert t.item() == br.total
        assert abs(br.total - (br.l_det + br.alpha * br.l_ta + br.beta * br.l_uta)) < 1e-12

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 1.0, 1.0, -1.0, 1.0)


class TestAdam:
    def test_single_quadratic_step(self):
        p = Parameter("x", np.full((1, 1, 1, 1), 2.0))
        opt = Adam([p], lr=0.1)
        for _ in range(2):
            opt.zero_grad()
            with Tape() as tape:
                tape.backward(ops.sum_all(ops.mul(p.value, p.value)))
            opt.step()
        # hand-computed: step 1 moves by lr * g / (|g| + eps), step 2 uses both moments
        g1 = 4.0
        x1 = 2.0 - 0.1 * g1 / (g1 + 1e-8)
        g2 = 2 * x1
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        mhat, vhat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
        want = x1 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
        assert p.data.item() == pytest.approx(want, abs=1e-12)


class TestTrainConfig:
    @pytest.mark.parametrize("bad", [dict(lr=0.0), dict(lam=-1.0), dict(epsilon=0.0), dict(batch=0), dict(alpha=-0.5)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


@pytest.fixture(scope="module")
def small():
    cfg = GeneratorConfig()
    return stack_scenes([generate_scene(s, cfg) for s in range(24)])


class TestTraining:
    def test_zero_epochs_is_initialisation(self, small, tmp_path):
        res = train(small, TrainConfig(epochs=0, seed=3))
        fresh = Detector(seed=3)
        for a, b in zip(res.model.parameters(), fresh.parameters()):
            assert np.array_equal(a.data, b.data)
        assert res.loss_csv().splitlines()[0] == "epoch,l_det,l_ta,l_uta,total"
        assert len(res.loss_csv().splitlines()) == 2

    def test_same_seed_bit_identical(self, small, tmp_path):
        cfg = TrainConfig(epochs=2, batch=8, seed=5)
        a, b = train(small, cfg), train(small, cfg)
        save_checkpoint(a.model, cfg, tmp_path / "a", a.loss_csv())
        save_checkpoint(b.model, cfg, tmp_path / "b", b.loss_csv())
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_loss_decreases(self, small):
        res = train(small, TrainConfig(epochs=6, batch=8))
        assert res.final.total < res.initial.total

    def test_checkpoint_roundtrip(self, small, tmp_path):
        cfg = TrainConfig(epochs=1, batch=8, seed=2)
        res = train(small, cfg, ModelConfig(top_k=2))
        save_checkpoint(res.model, cfg, tmp_path / "ck")
        model, tcfg = load_checkpoint(tmp_path / "ck")
        assert tcfg == cfg and model.config.top_k == 2
        for a, b in zip(model.parameters(), res.model.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(OSError, match="absent"):
            load_checkpoint(tmp_path / "absent")


def test_active_params_grow_with_k():
    from relfuse.harness.protocols import active_params

    m = Detector()
    one = active_params(m, np.array([[True, False, False]]))
    three = active_params(m, np.ones((1, 3), bool))
    assert three > one
    assert three - one == sum(m.expert_param_counts()[1:])
