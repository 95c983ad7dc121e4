import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import numeric_grad, rel_error
from tlw import tensor as T
from tlw.judge import Judge, JudgeSpec, build_fixed_feature_judge, get_judge, judge_distance, unit_normalize_channels

PIXEL = JudgeSpec(kind="pixel-mse")
DEFAULT = JudgeSpec()
SMALL = build_fixed_feature_judge((4, 6), kernel=3, seed=5)


@pytest.mark.parametrize("spec", [PIXEL, DEFAULT, SMALL])
def test_identity_is_zero(spec):
    x = T.Tensor(np.random.default_rng(0).random((2, 3, 8, 8)))
    np.testing.assert_array_equal(judge_distance(spec, x, x).data, 0.0)


def test_pixel_mse_constant_shift():
    a = np.random.default_rng(1).uniform(0, 0.9, (1, 3, 6, 6))
    d = judge_distance(PIXEL, T.Tensor(a, dtype=np.float64), T.Tensor(a + 0.1, dtype=np.float64))
    assert d.item() == pytest.approx(0.01, rel=1e-9)


def test_single_layer_identical_inputs():
    spec = build_fixed_feature_judge([3], kernel=1, seed=0)
    x = T.Tensor(np.full((1, 3, 4, 4), 0.3))
    assert judge_distance(spec, x, x).item() == 0.0


def test_same_spec_same_distance():
    rng = np.random.default_rng(2)
    a, b = T.Tensor(rng.random((1, 3, 8, 8))), T.Tensor(rng.random((1, 3, 8, 8)))
    d1 = Judge(DEFAULT).distance(a, b).data
    d2 = Judge(DEFAULT).distance(a, b).data
    assert d1.tobytes() == d2.tobytes()


def test_same_spec_across_processes():
    code = (
        "import numpy as np;"
        "from tlw import tensor as T;"
        "from tlw.judge import JudgeSpec, judge_distance;"
        "r=np.random.default_rng(4);"
        "a=T.Tensor(r.random((1,3,8,8)));b=T.Tensor(r.random((1,3,8,8)));"
        "print(judge_distance(JudgeSpec(),a,b).data.tobytes().hex())"
    )
    outs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1] and outs[0].strip()


def test_shape_mismatch():
    with pytest.raises(T.ShapeError):
        judge_distance(DEFAULT, T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((1, 3, 4, 5))))


def test_positive_for_tiny_differences():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        b = a.copy()
        i = tuple(rng.integers(0, s) for s in a.shape)
        b[i] += 1e-6 * (1 + rng.random())
        d = judge_distance(DEFAULT, T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64))
        assert d.item() > 0.0


images = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).random((1, 3, 6, 6)).astype(np.float32))


@settings(max_examples=30, deadline=None)
@given(a=images, b=images)
def test_metric_properties(a, b):
    for spec in (PIXEL, SMALL, DEFAULT):
        ta, tb = T.Tensor(a), T.Tensor(b)
        dab = judge_distance(spec, ta, tb).data
        dba = judge_distance(spec, tb, ta).data
        assert np.all(dab >= 0)
        np.testing.assert_array_equal(dab, dba)
        np.testing.assert_array_equal(judge_distance(spec, ta, ta).data, 0.0)


def test_parameters_frozen():
    judge = get_judge(DEFAULT)
    assert judge.parameters()
    for p in judge.parameters():
        assert not p.requires_grad
        assert not p.data.flags.writeable


def test_differentiable_in_both_inputs():
    rng = np.random.default_rng(6)
    a = T.Tensor(rng.random((1, 3, 5, 5)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(rng.random((1, 3, 5, 5)), requires_grad=True, dtype=np.float64)
    judge = Judge(SMALL)
    f = lambda: float(judge.distance(a, b).data[0])
    T.backward(T.sum_(judge.distance(a, b)))
    assert rel_error(a.grad, numeric_grad(f, a.data)) <= 1e-3
    assert rel_error(b.grad, numeric_grad(f, b.data)) <= 1e-3


def test_unit_normalize_gradient_and_zero_pixels():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(1, 4, 3, 3))
    data[0, :, 1, 1] = 0.0
    f_t = T.Tensor(data, requires_grad=True, dtype=np.float64)
    r = T.Tensor(rng.normal(size=data.shape), dtype=np.float64)
    y = unit_normalize_channels(f_t)
    norms = np.sqrt((y.data**2).sum(axis=1))
    np.testing.assert_allclose(np.delete(norms.ravel(), 4), 1.0, atol=1e-9)
    T.backward(T.sum_(y * r))
    assert np.all(np.isfinite(f_t.grad))
    mask = np.ones(data.shape, bool)
    mask[0, :, 1, 1] = False
    num = numeric_grad(lambda: float(T.sum_(unit_normalize_channels(f_t) * r).data), f_t.data, h=1e-6)
    assert rel_error(f_t.grad[mask], num[mask]) <= 1e-3


def test_spec_round_trip():
    assert JudgeSpec.from_dict(DEFAULT.to_dict()) == DEFAULT
    with pytest.raises(KeyError):
        JudgeSpec.from_dict({"kind": "pixel-mse", "bogus": 1})
    with pytest.raises(ValueError):
        JudgeSpec(kind="alexnet")
