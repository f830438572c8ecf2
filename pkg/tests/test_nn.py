import numpy as np
import pytest

from wsloc import nn
from wsloc import tensor as T
from wsloc.errors import ConfigError, FormatError, NumericalError


def f64(layer):
    return layer.astype(np.float64)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = nn.init_params(nn.DESK_SCALE, 3)
        b = nn.init_params(nn.DESK_SCALE, 3)
        for pa, pb in zip(a.params(), b.params()):
            assert pa.name == pb.name and pa.value.tobytes() == pb.value.tobytes()

    def test_different_seed_differs(self):
        a = nn.init_params(nn.DESK_SCALE, 3).params()[0].value
        b = nn.init_params(nn.DESK_SCALE, 4).params()[0].value
        assert not np.array_equal(a, b)

    def test_norm_params_start_at_identity(self):
        bb = nn.init_params(nn.DESK_SCALE, 0)
        for p in bb.params():
            if p.name.endswith(".scale"):
                assert np.all(p.value == 1)
            elif p.name.endswith(".shift"):
                assert np.all(p.value == 0)
        assert all(np.all(v == (1 if k.endswith("var") else 0)) for k, v in bb.buffers().items())

    def test_fan_in_variance(self):
        fan_in = 64 * 9
        for seed in range(10):
            conv = nn.Conv2d("c", T.ConvSpec(64, 64, 3, 3), np.random.default_rng(seed))
            var = conv.weight.value.astype(np.float64).var()
            assert abs(var / (2 / fan_in) - 1) < 0.2
            assert not conv.bias.value.any()

    def test_param_buffers_shape_equal(self):
        for p in nn.init_params(nn.DESK_SCALE, 0).params():
            assert p.grad.shape == p.value.shape == p.momentum_buffer.shape


class TestBackboneShapes:
    def test_desk_scale(self, rng):
        bb = nn.init_params(nn.DESK_SCALE, 0)
        y = bb.forward(rng.standard_normal((1, 96, 160, 3)).astype(np.float32), "eval")
        assert y.shape == (1, 12, 20, 64)
        assert nn.DESK_SCALE.global_stride == 8

    def test_full_scale_arithmetic(self):
        assert nn.FULL_SCALE.output_size(480, 854) == (60, 107)
        assert nn.FULL_SCALE.out_channels == 512
        assert nn.FULL_SCALE.global_stride == 8

    def test_stride_one_quadruples_resolution(self):
        orig = nn.DESK_SCALE.with_strides((2, 2, 2, 2))
        mod = nn.DESK_SCALE.with_strides((2, 2, 1, 1))
        for h, w in ((96, 160), (128, 256)):
            oh, ow = orig.output_size(h, w)
            mh, mw = mod.output_size(h, w)
            assert (mh, mw) == (4 * oh, 4 * ow)

    def test_measured_stride_matches_config(self):
        rng = np.random.default_rng(7)
        cfg = nn.BackboneConfig(((4, 0, 2), (4, 1, 2), (4, 0, 2)))
        bb = nn.init_params(cfg, 0)
        for _ in range(20):
            h, w = (int(v) for v in rng.integers(1, 60, size=2))
            y = bb.forward(np.zeros((1, h, w, 3), np.float32), "eval")
            assert y.shape[1:3] == (-(-h // 8), -(-w // 8))

    def test_channel_mismatch(self):
        bb = nn.init_params(nn.DESK_SCALE, 0)
        with pytest.raises(ConfigError):
            bb.forward(np.zeros((1, 16, 16, 4), np.float32))

    def test_bad_residual_rejected(self):
        with pytest.raises(ConfigError):
            nn.ResidualBlock("b", 8, 16, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            nn.ResidualBlock("b", 8, 8, np.random.default_rng(0), stride=2)

    def test_eval_is_pure(self, rng):
        bb = nn.init_params(nn.DESK_SCALE, 1)
        x = rng.standard_normal((2, 24, 40, 3)).astype(np.float32)
        a = bb.forward(x, "eval")
        b = bb.forward(x, "eval")
        assert a.tobytes() == b.tobytes()


class TestGradCheck:
    def test_pointwise_conv(self, rng):
        conv = f64(nn.Conv2d("c", T.ConvSpec(3, 4, 1, 1), rng))
        err, checks = nn.grad_check(conv, rng.standard_normal((2, 5, 6, 3)))
        assert err < 1e-6
        assert len(checks) == 16 + 180

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv3x3(self, rng, stride):
        conv = f64(nn.Conv2d("c", T.ConvSpec(3, 4, 3, 3, stride), rng))
        err, _ = nn.grad_check(conv, rng.standard_normal((2, 7, 6, 3)))
        assert err < 1e-4

    def test_batchnorm(self, rng):
        bn = f64(nn.BatchNorm2d("bn", 3))
        bn.scale.value = rng.standard_normal(3)
        err, _ = nn.grad_check(bn, rng.standard_normal((2, 4, 5, 3)))
        assert err < 1e-4

    def test_relu(self, rng):
        x = rng.standard_normal((2, 4, 5, 3))
        x[np.abs(x) < 1e-2] = 0.5  # keep clear of the kink
        err, _ = nn.grad_check(nn.ReLU(), x)
        assert err < 1e-4

    @pytest.mark.parametrize("skip", [True, False])
    def test_residual_block(self, rng, skip):
        block = f64(nn.ResidualBlock("r", 4, 4, rng, skip=skip))
        err, checks = nn.grad_check(block, rng.standard_normal((2, 12, 10, 4)))
        assert err < 1e-4
        assert sum(not c[3] for c in checks) < 0.1 * len(checks)

    def test_kink_crossings_are_flagged(self):
        # x = 5e-5 sits within epsilon of the ReLU kink: the central
        # difference reads 0.75, the derivative there is 1
        err, checks = nn.grad_check(nn.ReLU(), np.array([[[[5e-5]]]]), loss=lambda y: (float(y.sum()), np.ones_like(y)))
        assert err == 0.0
        (_, analytic, numeric, smooth), = checks
        assert analytic == 1.0 and abs(numeric - 0.75) < 1e-9 and not smooth

    def test_backbone(self, rng):
        bb = f64(nn.init_params(nn.BackboneConfig(((4, 0, 2), (6, 1, 2))), 0))
        bb.input_grad = True
        err, _ = nn.grad_check(bb, rng.standard_normal((2, 9, 11, 3)))
        assert err < 1e-4

    def test_degenerate_zero_case(self):
        conv = f64(nn.Conv2d("c", T.ConvSpec(2, 2, 3, 3), np.random.default_rng(0)))
        conv.weight.value[...] = 0
        err, checks = nn.grad_check(conv, np.zeros((1, 4, 4, 2)))
        assert np.isfinite(err) and all(np.isfinite(c[1]) and np.isfinite(c[2]) for c in checks)
        assert err < 1e-6

    def test_non_finite_loss_reported(self, rng):
        conv = f64(nn.Conv2d("c", T.ConvSpec(2, 2, 1, 1), rng))
        with pytest.raises(NumericalError):
            nn.grad_check(conv, rng.standard_normal((1, 2, 2, 2)), loss=lambda y: (float("nan"), y))

    def test_epsilon_must_be_positive(self, rng):
        with pytest.raises(ConfigError):
            nn.grad_check(nn.ReLU(), rng.standard_normal((1, 2, 2, 1)), epsilon=0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        tensors = {"a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
                   "b": rng.standard_normal(5).astype(np.float32),
                   "scalar_like": np.array([np.float32(1e-30)])}
        cfg = {"z": [1, 2], "a": {"k": 0.1}, "name": "x"}
        nn.write_checkpoint(tmp_path / "c.ckpt", cfg, tensors)
        cfg2, t2 = nn.read_checkpoint(tmp_path / "c.ckpt")
        assert cfg2 == cfg
        assert list(t2) == list(tensors)
        for k in tensors:
            assert t2[k].tobytes() == tensors[k].tobytes() and t2[k].shape == tensors[k].shape

    def test_layout(self, tmp_path):
        nn.write_checkpoint(tmp_path / "c.ckpt", {"k": 1}, {"w": np.array([1.0, 2.0], np.float32)})
        data = (tmp_path / "c.ckpt").read_bytes()
        assert data[:6] == b"HSEED1"
        text = b"k=1\n"
        assert data[6:10] == len(text).to_bytes(4, "little") and data[10:14] == text
        assert data[14:18] == (1).to_bytes(4, "little")
        assert data[18:20] == (1).to_bytes(2, "little") and data[20:21] == b"w"
        assert data[21] == 1 and data[22:26] == (2).to_bytes(4, "little")
        assert data[26:] == np.array([1.0, 2.0], "<f4").tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"NOTACKPT")
        with pytest.raises(FormatError, match="magic"):
            nn.read_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        nn.write_checkpoint(tmp_path / "c.ckpt", {}, {"w": np.zeros(100, np.float32)})
        data = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(data[:-8])
        with pytest.raises(FormatError):
            nn.read_checkpoint(tmp_path / "c.ckpt")
        (tmp_path / "c.ckpt").write_bytes(data + b"\0")
        with pytest.raises(FormatError):
            nn.read_checkpoint(tmp_path / "c.ckpt")
