import math

import numpy as np
import pytest

from pcnet.tensor import Tensor, recording, backward, upsample_linear, ShapeError
from pcnet.model import (
    Model, build_model, VARIANTS, PSEBlock, SEBlock, CFStage, Conv,
    LossConfig, multiscale_targets, total_loss, predict_full,
)
from pcnet.storage import save_checkpoint, load_checkpoint
from gradcheck import fd_check_screened


def f32(a):
    return Tensor(np.asarray(a, dtype=np.float32))


class TestPSEBlock:
    def test_shape_preserving_2d(self):
        rng = np.random.default_rng(0)
        pse = PSEBlock(rng, 16, 2)
        x = f32(rng.standard_normal((2, 16, 48, 48)))
        assert pse(x, train=True).shape == x.shape

    def test_shape_preserving_3d(self):
        rng = np.random.default_rng(1)
        pse = PSEBlock(rng, 8, 3)
        x = f32(rng.standard_normal((1, 8, 48, 48, 48)))
        assert pse(x, train=False).shape == x.shape

    def test_zeroed_branches_scale_input_by_half(self):
        rng = np.random.default_rng(2)
        pse = PSEBlock(rng, 8, 2)
        for conv in pse.branches:
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0
        x = f32(rng.standard_normal((1, 8, 12, 12)))
        _, copies = pse(x, train=False, return_branches=True)
        for c in copies:
            np.testing.assert_allclose(c.data, 0.5 * x.data, atol=1e-7)

    def test_constant_input_copies_coincide(self):
        # with equal-sum branch kernels and equal biases, a spatially
        # constant input yields identical channel weights on every branch
        rng = np.random.default_rng(3)
        pse = PSEBlock(rng, 4, 2)
        for b, conv in zip((1, 2, 3), pse.branches):
            conv.weight.data[...] = 0.3 / (4 * b * b)
            conv.bias.data[...] = 0.1
        x = f32(np.broadcast_to(
            rng.standard_normal((1, 4, 1, 1)), (1, 4, 9, 9)).copy())
        _, copies = pse(x, train=False, return_branches=True)
        np.testing.assert_allclose(copies[0].data, copies[1].data, atol=1e-6)
        np.testing.assert_allclose(copies[0].data, copies[2].data, atol=1e-6)

    def test_small_spatial_rejected(self):
        rng = np.random.default_rng(4)
        pse = PSEBlock(rng, 4, 2)
        with pytest.raises(ShapeError, match="axis"):
            pse(f32(np.zeros((1, 4, 2, 8))), train=False)

    @pytest.mark.parametrize("shape", [(1, 4, 3, 3), (2, 8, 7, 5), (1, 4, 3, 5, 4)])
    def test_shape_preserving_random(self, shape):
        rng = np.random.default_rng(5)
        pse = PSEBlock(rng, shape[1], len(shape) - 2)
        x = f32(rng.standard_normal(shape))
        assert pse(x, train=True).shape == shape


class TestSEBlock:
    def test_shape_preserving(self):
        rng = np.random.default_rng(6)
        se = SEBlock(rng, 16, 2)
        x = f32(rng.standard_normal((2, 16, 48, 48)))
        assert se(x).shape == x.shape

    def test_zeroed_weights_halve_input(self):
        rng = np.random.default_rng(7)
        se = SEBlock(rng, 8, 2)
        for conv in (se.reduce, se.expand):
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0
        x = f32(rng.standard_normal((1, 8, 6, 6)))
        np.testing.assert_allclose(se(x).data, 0.5 * x.data, atol=1e-7)

    def test_weights_constant_over_spatial(self):
        rng = np.random.default_rng(8)
        se = SEBlock(rng, 8, 2)
        x = f32(rng.uniform(0.5, 1.5, (2, 8, 6, 6)))
        ratio = se(x).data / x.data
        np.testing.assert_allclose(
            ratio, np.broadcast_to(ratio[:, :, :1, :1], ratio.shape), atol=1e-5)

    def test_indivisible_reduction_rejected(self):
        with pytest.raises(ShapeError, match="reduction"):
            SEBlock(np.random.default_rng(0), 6, 2)


class TestCFStage:
    def test_residual_zero_when_encoder_matches_reduction(self):
        rng = np.random.default_rng(9)
        cf = CFStage(rng, 16, 32, 2)
        deeper = f32(rng.standard_normal((1, 32, 12, 12)))
        up = upsample_linear(deeper)
        reduced = cf.reduce(up, train=False)
        out, residual = cf(reduced, deeper, train=False, return_residual=True)
        np.testing.assert_allclose(residual.data, 0, atol=1e-6)
        assert out.shape == (1, 16, 24, 24)

    def test_residual_recovers_signed_pattern(self):
        rng = np.random.default_rng(10)
        cf = CFStage(rng, 8, 16, 2)
        deeper = f32(rng.standard_normal((1, 16, 6, 6)))
        reduced = cf.reduce(upsample_linear(deeper), train=False)
        pattern = rng.choice([-0.5, 0.5], size=(1, 8, 12, 12)).astype(np.float32)
        skip = f32(reduced.data + pattern)
        _, residual = cf(skip, deeper, train=False, return_residual=True)
        assert np.all(np.sign(residual.data) == np.sign(pattern))
        np.testing.assert_allclose(residual.data, pattern, atol=1e-5)

    def test_output_shape(self):
        rng = np.random.default_rng(11)
        cf = CFStage(rng, 16, 32, 2)
        skip = f32(rng.standard_normal((1, 16, 24, 24)))
        deeper = f32(rng.standard_normal((1, 32, 12, 12)))
        assert cf(skip, deeper, train=False).shape == (1, 16, 24, 24)

    def test_wrong_ratio_rejected(self):
        rng = np.random.default_rng(12)
        cf = CFStage(rng, 8, 16, 2)
        with pytest.raises(ShapeError, match="double"):
            cf(f32(np.zeros((1, 8, 20, 20))), f32(np.zeros((1, 16, 12, 12))),
               train=False)


class TestBuildModel:
    def test_unet_forward_shapes_and_range(self):
        m = build_model("UNet", 2, 8, seed=0)
        x = f32(np.random.default_rng(0).random((1, 1, 48, 48)))
        full, half, quarter = m.forward(x, train=False)
        assert full.shape == (1, 1, 48, 48)
        assert np.all((full.data > 0) & (full.data < 1))

    def test_pcnet_three_output_resolutions(self):
        m = build_model("PCNet", 2, 8, seed=0)
        x = f32(np.random.default_rng(1).random((2, 1, 48, 48)))
        full, half, quarter = m.forward(x, train=True)
        assert full.shape == (2, 1, 48, 48)
        assert half.shape == (2, 1, 24, 24)
        assert quarter.shape == (2, 1, 12, 12)
        for out in (full, half, quarter):
            assert np.all((out.data > 0) & (out.data < 1))

    @pytest.mark.parametrize("c", [8, 16])
    def test_parameter_count_ordering(self, c):
        counts = {v: build_model(v, 2, c).complexity().parameter_count
                  for v in ("UNet", "UNetNoDS", "UNetCF", "UNetPSE", "PCNet")}
        assert counts["UNet"] == counts["UNetNoDS"]
        assert counts["UNet"] < counts["UNetCF"] < counts["UNetPSE"] < counts["PCNet"]

    def test_flops_ordering(self):
        fl = {v: build_model(v, 2, 16).complexity().flops
              for v in ("UNet", "UNetNoDS", "UNetCF", "UNetPSE", "PCNet")}
        assert fl["UNet"] == fl["UNetNoDS"]
        assert fl["UNet"] < fl["UNetCF"] < fl["UNetPSE"] < fl["PCNet"]

    def test_reference_width_lands_near_half_million(self):
        count = build_model("UNet", 2, 16).complexity().parameter_count
        assert 0.8 * 0.47e6 <= count <= 1.2 * 0.47e6

    def test_doubling_channels_quadruples_params(self):
        a = build_model("UNet", 2, 8).complexity().parameter_count
        b = build_model("UNet", 2, 16).complexity().parameter_count
        assert 3.5 <= b / a <= 4.2

    def test_lone_conv_parameter_count(self):
        conv = Conv(np.random.default_rng(0), 1, 8, 3, 2, pad=1)
        assert sum(t.size for _, t in conv.params()) == 80

    def test_every_parameter_reachable(self):
        # training any head must touch every trainable tensor through the
        # loss; verified via gradient presence on a full forward+loss
        m = build_model("PCNet", 2, 4, seed=3, dtype=np.float64)
        rng = np.random.default_rng(3)
        x = Tensor(rng.random((1, 1, 48, 48)))
        y = Tensor((rng.random((1, 1, 48, 48)) > 0.7).astype(np.float64))
        targets = multiscale_targets(y)
        params = m.parameters()
        with recording() as tape:
            loss, _ = total_loss(m.forward(x, train=True), targets)
        backward(loss, tape)
        missing = [n for n, p in params.items() if p.grad is None]
        assert missing == []

    def test_deterministic_init(self):
        a = build_model("PCNet", 2, 8, seed=42).parameters()
        b = build_model("PCNet", 2, 8, seed=42).parameters()
        for n in a:
            np.testing.assert_array_equal(a[n].data, b[n].data)

    def test_invalid_variant(self):
        with pytest.raises(ValueError, match="variant"):
            build_model("UNetDA", 2, 8)

    def test_base_channels_validated(self):
        with pytest.raises(ValueError, match="base_channels"):
            build_model("UNet", 2, 6)

    def test_3d_forward_shapes(self):
        m = build_model("PCNet", 3, 4, seed=0)
        x = f32(np.random.default_rng(2).random((1, 1, 48, 48, 48)))
        full, half, quarter = m.forward(x, train=False)
        assert full.shape == (1, 1, 48, 48, 48)
        assert half.shape == (1, 1, 24, 24, 24)
        assert quarter.shape == (1, 1, 12, 12, 12)

    def test_deep_supervision_flag(self):
        assert not build_model("UNetNoDS", 2, 8).deep_supervision
        assert build_model("UNet", 2, 8).deep_supervision


class TestGradientsThroughVariants:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_full_forward_loss_gradcheck_2d(self, variant):
        rng = np.random.default_rng(17)
        m = build_model(variant, 2, 8, seed=11, dtype=np.float64)
        x = Tensor(rng.random((1, 1, 48, 48)))
        y = Tensor((rng.random((1, 1, 48, 48)) > 0.8).astype(np.float64))
        targets = multiscale_targets(y)
        params = m.parameters()

        def build():
            loss, _ = total_loss(m.forward(x, train=True), targets)
            return loss

        fd_check_screened(build, params, rng, n_coords=8, max_draws=400)

    def test_reduced_3d_gradcheck(self):
        rng = np.random.default_rng(23)
        m = build_model("PCNet", 3, 8, seed=5, levels=2, dtype=np.float64)
        x = Tensor(rng.random((1, 1, 24, 24, 24)))
        y = Tensor((rng.random((1, 1, 24, 24, 24)) > 0.9).astype(np.float64))
        targets = multiscale_targets(y)
        params = m.parameters()

        def build():
            loss, _ = total_loss(m.forward(x, train=True), targets)
            return loss

        fd_check_screened(build, params, rng, n_coords=5, max_draws=400)

    def test_full_3d_loss_finite_at_48(self):
        rng = np.random.default_rng(29)
        m = build_model("PCNet", 3, 4, seed=7)
        x = f32(rng.random((1, 1, 48, 48, 48)))
        y = Tensor((rng.random((1, 1, 48, 48, 48)) > 0.99).astype(np.float32))
        loss, _ = total_loss(m.forward(x, train=True), multiscale_targets(y))
        assert np.isfinite(loss.item())


class TestMultiscaleTargets:
    def test_zero_mask(self):
        y = Tensor(np.zeros((1, 1, 16, 16), np.float32))
        t1, t2, t3 = multiscale_targets(y)
        assert t2.data.sum() == 0 and t3.data.sum() == 0

    def test_single_pixel_location(self):
        mask = np.zeros((1, 1, 48, 48), np.float32)
        mask[0, 0, 5, 6] = 1
        _, ms2, ms3 = multiscale_targets(Tensor(mask))
        assert ms2.data.sum() == 1 and ms2.data[0, 0, 2, 3] == 1
        assert ms3.data.sum() == 1 and ms3.data[0, 0, 1, 1] == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_window_or_property(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((1, 1, 24, 24)) > 0.8).astype(np.float32)
        _, ms2, _ = multiscale_targets(Tensor(mask))
        blocks = mask.reshape(1, 1, 12, 2, 12, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(ms2.data, blocks)
        assert set(np.unique(ms2.data)) <= {0.0, 1.0}

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            multiscale_targets(Tensor(np.full((1, 1, 8, 8), 0.5)))

    def test_indivisible_extent_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            multiscale_targets(Tensor(np.zeros((1, 1, 10, 8), np.float32)))


class TestTotalLoss:
    def _const_outputs(self, value=0.5):
        rng = np.random.default_rng(0)
        outs = [Tensor(np.full((1, 1, s, s), value, np.float32))
                for s in (8, 4, 2)]
        tgts = [Tensor((rng.random((1, 1, s, s)) > 0.5).astype(np.float32))
                for s in (8, 4, 2)]
        return outs, tgts

    def test_all_half_predictions(self):
        outs, tgts = self._const_outputs()
        loss, _ = total_loss(outs, tgts, LossConfig(0.67, 0.33))
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_zero_weights_reduce_to_main(self):
        outs, tgts = self._const_outputs()
        loss, parts = total_loss(outs, tgts, LossConfig(0.0, 0.0))
        from pcnet.tensor import bce_loss
        assert loss.item() == bce_loss(outs[0], tgts[0]).item()
        assert parts[1] is None and parts[2] is None

    @pytest.mark.parametrize("seed", range(4))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        outs = [Tensor(rng.uniform(0.01, 0.99, (1, 1, s, s)).astype(np.float32))
                for s in (8, 4, 2)]
        tgts = [Tensor((rng.random((1, 1, s, s)) > 0.5).astype(np.float32))
                for s in (8, 4, 2)]
        loss, _ = total_loss(outs, tgts)
        assert loss.item() >= 0

    def test_shape_mismatch_rejected(self):
        outs, tgts = self._const_outputs()
        tgts[1] = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        with pytest.raises(ShapeError, match="scale 1"):
            total_loss(outs, tgts)

    def test_lambda_range_validated(self):
        with pytest.raises(ValueError):
            LossConfig(lambda2=1.5)


class _ConstantModel:
    spatial_rank = 2
    dtype = np.float32

    def __init__(self, p):
        self.p = p

    def forward(self, x, train=False):
        out = Tensor(np.full((x.shape[0], 1) + x.shape[2:], self.p, np.float32))
        return out, None, None


class TestPredictFull:
    def test_single_patch_identity(self):
        m = build_model("UNet", 2, 8, seed=1)
        img = np.random.default_rng(4).random((1, 48, 48)).astype(np.float32)
        direct = m.forward(f32(img[None]), train=False)[0].data[0]
        stitched = predict_full(m, f32(img)).data
        np.testing.assert_allclose(stitched, direct, atol=1e-6)

    def test_constant_model_gives_constant_map(self):
        img = f32(np.zeros((1, 100, 75)))
        out = predict_full(_ConstantModel(0.37), img)
        assert out.shape == (1, 100, 75)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-6)

    def test_weights_cover_every_voxel(self):
        img = f32(np.zeros((1, 70, 91)))
        _, w = predict_full(_ConstantModel(0.5), img, return_weights=True)
        assert np.all(w >= 1)

    def test_small_image_reflect_padded(self):
        img = f32(np.random.default_rng(5).random((1, 30, 48)))
        out = predict_full(_ConstantModel(0.2), img)
        assert out.shape == (1, 30, 48)


class TestCheckpointIntegration:
    def test_round_trip_preserves_outputs(self, tmp_path):
        m = build_model("UNetSE", 2, 8, seed=9)
        x = f32(np.random.default_rng(6).random((1, 1, 48, 48)))
        ref = m.forward(x, train=False)[0].data
        p = tmp_path / "model.ckpt"
        save_checkpoint(p, m.variant, m.spatial_rank, m.base_channels,
                        m.state_tensors())
        meta, tensors = load_checkpoint(p)
        m2 = build_model(meta["variant"], meta["spatial_rank"],
                         meta["base_channels"], seed=999)
        m2.load_state(tensors)
        np.testing.assert_array_equal(m2.forward(x, train=False)[0].data, ref)
