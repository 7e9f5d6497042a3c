import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanillanet.architecture import ArchSpec, build, param_count
from vanillanet.data import synthetic_blobs
from vanillanet.fusion import (
    FusionError,
    calibrate_bn,
    fold_bn,
    fuse_network,
    merge_conv_1x1,
    merge_conv_kxk_1x1,
    random_inputs,
    verify_equivalence,
)
from vanillanet.ops import BatchNormParams, ConvParams, ShapeError, batchnorm, conv2d
from vanillanet.training import evaluate


def rand_conv(rng, c_in, c_out, k=1, stride=1, padding=0):
    return ConvParams(rng.standard_normal((c_out, c_in, k, k)), rng.standard_normal(c_out), stride, padding)


def rand_bn(rng, c):
    return BatchNormParams(rng.uniform(0.5, 1.5, c), rng.standard_normal(c), rng.standard_normal(c),
                           rng.uniform(0.1, 2.0, c))


def fusable(variant, seed=0, dtype=np.float64, **kw):
    spec = ArchSpec(variant=variant, width_scale=1 / 16, input_size=(32, 32), **kw)
    g = build(spec, seed=seed, dtype=dtype)
    g.set_lambda(1.0)
    calibrate_bn(g, random_inputs(spec, 64, seed=99, dtype=dtype))
    return g


class TestFoldBN:
    def test_identity_bn_leaves_conv(self, rng):
        conv = rand_conv(rng, 3, 4, 3, 1, 1)
        folded = fold_bn(conv, BatchNormParams.identity(4, eps=1e-300))
        np.testing.assert_allclose(folded.weight, conv.weight, rtol=1e-15)
        np.testing.assert_allclose(folded.bias, conv.bias, rtol=1e-15)

    def test_formula(self):
        conv = ConvParams(np.array([[[[2.0]]]]), np.array([1.0]))
        bn = BatchNormParams(np.array([3.0]), np.array([0.5]), np.array([2.0]), np.array([4.0 - 1e-5]))
        f = fold_bn(conv, bn)
        assert f.weight[0, 0, 0, 0] == pytest.approx(3.0)
        assert f.bias[0] == pytest.approx((1.0 - 2.0) * 1.5 + 0.5)

    @pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (4, 4, 0)])
    def test_two_paths_agree(self, rng, k, stride, pad):
        conv, bn = rand_conv(rng, 3, 5, k, stride, pad), rand_bn(rng, 5)
        x = rng.standard_normal((2, 3, 8, 8))
        assert np.max(np.abs(batchnorm(conv2d(x, conv), bn) - conv2d(x, fold_bn(conv, bn)))) <= 1e-10

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fold_bn(rand_conv(rng, 2, 3), BatchNormParams.identity(4))


class TestMerge:
    def test_pointwise_pair(self, rng):
        inner, outer = rand_conv(rng, 4, 6), rand_conv(rng, 6, 3)
        x = rng.standard_normal((2, 4, 5, 5))
        merged = merge_conv_1x1(outer, inner)
        assert merged.weight.shape == (3, 4, 1, 1)
        assert np.max(np.abs(conv2d(conv2d(x, inner), outer) - conv2d(x, merged))) <= 1e-10

    @pytest.mark.parametrize("k,stride,pad", [(4, 4, 0), (3, 1, 1), (3, 2, 1)])
    def test_kxk_then_pointwise(self, rng, k, stride, pad):
        inner, outer = rand_conv(rng, 3, 5, k, stride, pad), rand_conv(rng, 5, 4)
        x = rng.standard_normal((2, 3, 8, 8))
        if (8 + 2 * pad - k) % stride:
            x = rng.standard_normal((2, 3, 9, 9))
        merged = merge_conv_kxk_1x1(inner, outer)
        assert (merged.stride, merged.padding) == (stride, pad)
        assert np.max(np.abs(conv2d(conv2d(x, inner), outer) - conv2d(x, merged))) <= 1e-10

    def test_rejects_non_pointwise_outer(self, rng):
        with pytest.raises(ShapeError):
            merge_conv_kxk_1x1(rand_conv(rng, 3, 4, 3), rand_conv(rng, 4, 4, 3))
        with pytest.raises(ShapeError):
            merge_conv_1x1(rand_conv(rng, 5, 4), rand_conv(rng, 3, 4))


class TestFuseNetwork:
    @pytest.mark.parametrize("variant", [5, 6, 7])
    def test_f64_equivalence(self, variant):
        g = fusable(variant)
        fused, report = fuse_network(g, num_samples=16)
        assert report.passed
        assert report.max_deviation <= 1e-10
        assert report.argmax_agreement == 1.0
        assert report.passes == ["fold_bn", "drop_lambda_act", "merge_conv"]
        assert set(report.layers) == {n for n, _ in g.units()}
        assert fused.spec.mode == "deploy"
        assert param_count(fused) < param_count(g)

    def test_f32_equivalence(self):
        g = fusable(6, dtype=np.float32)
        fused, report = fuse_network(g, num_samples=16)
        assert report.dtype == "float32"
        assert report.max_deviation <= 1e-5

    def test_fused_matches_fresh_deploy_structure(self):
        g = fusable(6)
        fused, _ = fuse_network(g)
        ref = build(g.spec.with_(mode="deploy"), init=False)
        assert [n for n, _ in fused.named_parameters()] == [n for n, _ in ref.named_parameters()]
        for (_, a), (_, b) in zip(fused.named_parameters(), ref.named_parameters()):
            assert a.shape == b.shape

    def test_lambda_below_one_rejected(self):
        g = fusable(5)
        g.set_lambda(0.9)
        with pytest.raises(FusionError, match="not identity"):
            fuse_network(g)

    def test_deploy_input_is_noop(self):
        g = fusable(5)
        fused, _ = fuse_network(g)
        again, report = fuse_network(fused)
        assert again is fused
        assert report.passes == []

    def test_without_deep_training(self):
        g = fusable(5, deep_train=False)
        fused, report = fuse_network(g)
        assert report.passes == ["fold_bn"]
        assert report.max_deviation <= 1e-10

    @pytest.mark.parametrize("mode", ["before_act", "after_act"])
    def test_with_shortcuts(self, mode):
        g = fusable(6, shortcut=mode)
        fused, report = fuse_network(g)
        assert fused.children["stages.2.0"].shortcut == mode
        assert report.max_deviation <= 1e-10

    def test_act_after_pool(self):
        fused, report = fuse_network(fusable(6, act_after_pool=True))
        assert report.max_deviation <= 1e-10

    def test_verify_detects_tampering(self):
        g = fusable(5)
        fused, _ = fuse_network(g)
        fused.children["stages.2.0"].children["conv"].params["bias"] += 1e-3
        report = verify_equivalence(g, fused, num_samples=8)
        assert not report.passed
        assert report.layers["stages.2.0"] > 1e-4
        assert report.layers["stem"] <= 1e-10

    def test_report_serializes(self):
        _, report = fuse_network(fusable(5))
        d = report.to_dict()
        assert d["schema_version"] == 1
        assert {"passes", "layers", "max_deviation", "argmax_agreement", "passed", "tol"} <= set(d)

    def test_evaluate_accuracy_identical(self):
        g = fusable(5)
        data = synthetic_blobs(10, 200, 32, seed=4)
        data.images = np.repeat(data.images, 3, axis=1)
        fused, _ = fuse_network(g)
        assert evaluate(fused, data)[1] == evaluate(g, data)[1]


class TestCalibrate:
    def test_sets_exact_statistics(self, rng):
        g = build(ArchSpec(variant=5, width_scale=1 / 16, input_size=(32, 32)), dtype=np.float64)
        x = rng.standard_normal((8, 3, 32, 32))
        calibrate_bn(g, x)
        stem = g.children["stem"]
        h = stem.children["conv1"].forward(x)
        np.testing.assert_allclose(stem.children["bn1"].buffers["running_mean"], h.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(stem.children["bn1"].buffers["running_var"], h.var(axis=(0, 2, 3)))


@settings(max_examples=50, deadline=None)
@given(c_in=st.integers(1, 6), c_mid=st.integers(1, 6), c_out=st.integers(1, 6), k=st.sampled_from([1, 2, 3]),
       seed=st.integers(0, 2**31))
def test_fold_then_merge_property(c_in, c_mid, c_out, k, seed):
    rng = np.random.default_rng(seed)
    c1, b1 = rand_conv(rng, c_in, c_mid, k, 1, k // 2), rand_bn(rng, c_mid)
    c2, b2 = rand_conv(rng, c_mid, c_out), rand_bn(rng, c_out)
    x = rng.standard_normal((2, c_in, 6, 6))
    if (6 + 2 * (k // 2) - k) < 0:
        return
    ref = batchnorm(conv2d(batchnorm(conv2d(x, c1), b1), c2), b2)
    merged = merge_conv_kxk_1x1(fold_bn(c1, b1), fold_bn(c2, b2))
    assert np.max(np.abs(ref - conv2d(x, merged))) <= 1e-10 * max(1.0, np.abs(ref).max())
