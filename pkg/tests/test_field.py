import json
import math
import struct

import numpy as np
import pytest

from mipdesk import field, oracle
from mipdesk.field import MlpSpec, RadianceMlp

FULL_SINGLE = 612_000
NERF_TWO_MLP = 1_191_000


def small_mlp(skip=None, seed=0, dtype=np.float64):
    return RadianceMlp.init(MlpSpec(12, 6, depth=3, width=16, skip=skip), seed, dtype)


def inputs(mlp, B=3, n=4, seed=0):
    gen = np.random.default_rng(seed)
    return gen.normal(size=(B, n, mlp.spec.in_dim)), gen.normal(size=(B, mlp.spec.dir_dim))


class TestForward:
    def test_zero_density_layer_gives_shifted_softplus_of_zero(self):
        mlp = small_mlp()
        mlp.params["density.w"][:] = 0
        tau, _, _ = mlp.forward(*inputs(mlp))
        assert np.allclose(tau, math.log(1 + math.exp(-1)), rtol=1e-15)
        assert math.log(1 + math.exp(-1)) == pytest.approx(0.3133, abs=1e-4)

    @pytest.mark.parametrize("bias,expected", [(-1e4, -field.COLOR_PAD), (1e4, 1 + field.COLOR_PAD)])
    def test_color_limits(self, bias, expected):
        mlp = small_mlp()
        mlp.params["rgb.w"][:] = 0
        mlp.params["rgb.b"][:] = bias
        _, rgb, _ = mlp.forward(*inputs(mlp))
        assert np.allclose(rgb, expected, rtol=0, atol=1e-15)

    def test_outputs_in_range(self):
        mlp = small_mlp()
        mlp.params["rgb.w"] *= 50
        tau, rgb, _ = mlp.forward(*inputs(mlp))
        assert (tau >= 0).all()
        # Open interval mathematically; float64 sigmoid saturates at the ends.
        assert (rgb >= -field.COLOR_PAD - 1e-15).all() and (rgb <= 1 + field.COLOR_PAD + 1e-15).all()

    def test_view_direction_never_changes_density(self):
        mlp = small_mlp()
        x, v = inputs(mlp)
        tau_a, rgb_a, _ = mlp.forward(x, v)
        tau_b, rgb_b, _ = mlp.forward(x, v + 3.0)
        assert np.array_equal(tau_a, tau_b)
        assert not np.allclose(rgb_a, rgb_b)

    def test_dimension_mismatch(self):
        mlp = small_mlp()
        x, v = inputs(mlp)
        with pytest.raises(ValueError):
            mlp.forward(x[..., :-1], v)
        with pytest.raises(ValueError):
            mlp.forward(x, v[:, :-1])

    def test_deterministic_init(self):
        a, b = small_mlp(seed=4), small_mlp(seed=4)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert not np.array_equal(a.flat(), small_mlp(seed=5).flat())


def mlp_loss_closure(mlp, x, v, g_tau, g_rgb):
    def loss():
        tau, rgb, _ = mlp.forward(x, v)
        return float(np.sum(tau * g_tau) + np.sum(rgb * g_rgb))
    return loss


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        mlp = small_mlp()
        _, _, cache = mlp.forward(*inputs(mlp))
        grads = mlp.backward(cache, np.zeros((3, 4)), np.zeros((3, 4, 3)))
        assert all(not g.any() for g in grads.values())

    def test_missing_cache(self):
        mlp = small_mlp()
        with pytest.raises(ValueError):
            mlp.backward(None, np.zeros((3, 4)), np.zeros((3, 4, 3)))

    @pytest.mark.parametrize("skip", [None, 1])
    def test_matches_finite_differences(self, skip):
        mlp = small_mlp(skip=skip, seed=1)
        x, v = inputs(mlp, seed=2)
        gen = np.random.default_rng(7)
        g_tau, g_rgb = gen.normal(size=(3, 4)), gen.normal(size=(3, 4, 3))
        _, _, cache = mlp.forward(x, v)
        grads = mlp.backward(cache, g_tau, g_rgb)
        names = mlp.names()
        arrays = [mlp.params[k] for k in names]
        idx = [(a, i) for a in range(len(names)) for i in gen.choice(arrays[a].size, min(6, arrays[a].size), replace=False)]
        fd = oracle.finite_diff_gradient(mlp_loss_closure(mlp, x, v, g_tau, g_rgb), arrays, idx, h=1e-6)
        an = np.array([grads[names[a]].reshape(-1)[i] for a, i in idx])
        assert np.max(np.abs(an - fd) / np.maximum(1, np.abs(fd))) <= 1e-4

    def test_density_ignores_view_branch(self):
        mlp = small_mlp()
        _, _, cache = mlp.forward(*inputs(mlp))
        grads = mlp.backward(cache, np.ones((3, 4)), np.zeros((3, 4, 3)))
        for k in ("view.w", "view.b", "rgb.w", "rgb.b", "bottleneck.w", "bottleneck.b"):
            assert not grads[k].any(), k

    def test_accumulates_into_given_buffer(self):
        mlp = small_mlp()
        x, v = inputs(mlp)
        _, _, cache = mlp.forward(x, v)
        once = mlp.backward(cache, np.ones((3, 4)), np.ones((3, 4, 3)))
        twice = mlp.backward(cache, np.ones((3, 4)), np.ones((3, 4, 3)), {k: g.copy() for k, g in once.items()})
        assert all(np.allclose(twice[k], 2 * once[k]) for k in once)


class TestParameterCount:
    def test_formula_matches_construction(self):
        for spec in (MlpSpec.desk(96, 24), MlpSpec.full(96, 24), MlpSpec(12, 6, 3, 16, skip=1)):
            assert RadianceMlp.init(spec).param_count() == spec.param_count()

    def test_desk_count(self):
        # 96->64, 3 x 64->64, density 64->1, bottleneck 64->64, view 88->32, rgb 32->3
        expected = (96 * 64 + 64) + 3 * (64 * 64 + 64) + 65 + (64 * 64 + 64) + (88 * 32 + 32) + (32 * 3 + 3)
        assert MlpSpec.desk(96, 24).param_count() == expected

    def test_full_single_mlp_near_612k(self):
        n = MlpSpec.full(96, 24).param_count()
        assert abs(n - FULL_SINGLE) <= 0.02 * FULL_SINGLE

    def test_two_mlps_exactly_double(self):
        n = MlpSpec.full(96, 24).param_count()
        assert 2 * RadianceMlp.init(MlpSpec.full(96, 24)).param_count() == 2 * n

    def test_nerf_layout_matches_1191k(self):
        # Identity-concatenated PE inputs (3 + 60, 3 + 24) reproduce the larger count.
        n = 2 * MlpSpec(63, 27, depth=8, width=256, skip=4).param_count()
        assert abs(n - NERF_TWO_MLP) <= 0.02 * NERF_TWO_MLP

    @pytest.mark.xfail(strict=True, reason="two IPE-input MLPs total 1,224,712, 2.8% above 1,191K; see notes")
    def test_two_ipe_mlps_within_2pct_of_1191k(self):
        n = 2 * MlpSpec.full(96, 24).param_count()
        assert abs(n - NERF_TWO_MLP) <= 0.02 * NERF_TWO_MLP


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        mlps = [small_mlp(skip=1, dtype=np.float32), small_mlp(seed=3, dtype=np.float32)]
        path = tmp_path / "m.bin"
        field.save_checkpoint(path, mlps, {"note": "x"})
        loaded, meta = field.load_checkpoint(path)
        assert meta == {"note": "x"}
        for a, b in zip(mlps, loaded):
            assert a.spec == b.spec
            assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_layout(self, tmp_path):
        mlp = small_mlp(dtype=np.float32)
        path = tmp_path / "m.bin"
        field.save_checkpoint(path, [mlp])
        raw = path.read_bytes()
        assert raw[:8] == field.CKPT_MAGIC
        version, hlen = struct.unpack("<II", raw[8:16])
        assert version == field.CKPT_VERSION
        body = raw[16 + hlen:]
        assert len(body) == 4 * mlp.param_count()
        first = np.frombuffer(body[: 4 * mlp.params["trunk.0.w"].size], dtype="<f4")
        assert np.array_equal(first, mlp.params["trunk.0.w"].ravel())
        side = json.loads((tmp_path / "m.bin.json").read_text())
        assert side["models"][0]["spec"]["width"] == 16

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError):
            field.load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v.bin"
        p.write_bytes(field.CKPT_MAGIC + struct.pack("<II", 99, 2) + b"{}")
        with pytest.raises(ValueError):
            field.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        mlp = small_mlp(dtype=np.float32)
        p = tmp_path / "t.bin"
        field.save_checkpoint(p, [mlp])
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ValueError):
            field.load_checkpoint(p)
