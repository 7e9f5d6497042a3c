import numpy as np
import pytest

from vanillanet.architecture import ArchSpec, build
from vanillanet.gradcheck import GradCheckReport, grad_check, layer_type, rel_error
from vanillanet.layers import BatchNorm2d, Conv2d, GlobalAvgPool, LambdaAct, Module, Sequential
from vanillanet.ops import ConvParams


class Flatten(Module):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dy):
        return dy.reshape(self.shape)


def identity_net(c=4):
    w = np.eye(c).reshape(c, c, 1, 1)
    return Sequential(("conv", Conv2d.from_params(ConvParams(w, np.zeros(c)))),
                      ("act", LambdaAct(1.0)), ("pool", GlobalAvgPool()), ("flat", Flatten()))


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(0)
    return rng.standard_normal((4, 3, 32, 32)), rng.integers(0, 10, 4)


@pytest.fixture(scope="module")
def v5():
    return build(ArchSpec(variant=5, width_scale=1 / 16, input_size=(32, 32), num_classes=10), seed=0)


class TestGradCheck:
    def test_identity_network(self, rng):
        x, y = rng.standard_normal((3, 4, 5, 5)), rng.integers(0, 4, 3)
        report = grad_check(identity_net(), x, y, per_type=50)
        assert report.max_rel_err <= 1e-6
        assert set(report.per_type) == {"conv", "input"}

    def test_small_network(self, v5, batch):
        report = grad_check(v5, *batch, per_type=40)
        assert report.passed(1e-4)
        assert set(report.per_type) == {"conv", "batchnorm", "series_act", "classifier", "input"}
        for kind, row in report.per_type.items():
            assert row["checked"] >= 20, kind

    def test_detects_sign_flip(self, v5, batch):
        flip = lambda name, g: -g if name.endswith("conv1.weight") else g
        report = grad_check(v5, *batch, per_type=40, corrupt=flip)
        assert report.per_type["conv"]["max_rel_err"] > 1e-1
        assert report.per_type["batchnorm"]["max_rel_err"] <= 1e-4
        assert not report.passed()

    def test_bce_loss(self, v5, batch):
        assert grad_check(v5, *batch, per_type=10, loss="bce", label_smoothing=0.1).passed(1e-4)

    def test_leaves_graph_untouched(self, v5, batch):
        before = {k: v.copy() for k, v in v5.named_parameters()}
        buffers = {k: v.copy() for k, v in v5.named_buffers()}
        grad_check(v5, *batch, per_type=5)
        for k, v in v5.named_parameters():
            assert v.dtype == np.float32 and np.array_equal(v, before[k])
        for k, v in v5.named_buffers():
            assert np.array_equal(v, buffers[k])

    def test_report_dict(self, rng):
        report = grad_check(identity_net(), rng.standard_normal((2, 4, 3, 3)), np.array([0, 1]), per_type=3)
        d = report.to_dict()
        assert d["schema_version"] == 1 and d["step"] == 1e-5
        assert isinstance(report, GradCheckReport)


def test_rel_error_floor():
    assert rel_error(1e-9, 2e-9) == pytest.approx(1e-3)
    assert rel_error(1.0, 1.5) == pytest.approx(1 / 3)
    assert rel_error(0.0, 0.0) == 0.0


def test_layer_types(v5):
    head = v5.head
    assert layer_type(head.children["cls"], head) == "classifier"
    assert layer_type(Conv2d(1, 1), None) == "conv"
    assert layer_type(BatchNorm2d(2), None) == "batchnorm"
    assert layer_type(GlobalAvgPool(), None) is None
