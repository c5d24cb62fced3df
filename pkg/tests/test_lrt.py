import numpy as np
import pytest

from ift import lrt
from ift.autodiff import Graph, Tensor, default_dtype, ops, parameter
from ift.autodiff.gradcheck import check_gradients
from ift.checks import loop_window_msa
from ift.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def msa_params(rng, D=8, heads=2):
    p = lrt.init_params(rng, ModelConfig(D=D, lrt_heads=heads), 4).scope("blocks.0.msa")
    for v in p.values():
        v.data[...] = rng.standard_normal(v.shape)
    return p


# --------------------------------------------------------------- channel attention


def test_ca_zero_second_layer_halves(rng):
    x = Tensor(rng.standard_normal((1, 4, 4, 8)))
    out = lrt.channel_attention(x, Tensor(rng.standard_normal((8, 2))), Tensor(np.zeros((2, 8))))
    assert np.allclose(out.data, x.data / 2)


def test_ca_never_amplifies(rng):
    x = Tensor(rng.standard_normal((2, 5, 5, 8)) * 10)
    out = lrt.channel_attention(x, Tensor(rng.standard_normal((8, 2)) * 5), Tensor(rng.standard_normal((2, 8)) * 5))
    assert np.all(np.abs(out.data) <= np.abs(x.data))


def test_ca_gradient(rng):
    with default_dtype(np.float64):
        x, w1, w2 = parameter(rng.standard_normal((1, 4, 4, 8))), parameter(rng.standard_normal((8, 2))), parameter(rng.standard_normal((2, 8)))
        R = rng.standard_normal((1, 4, 4, 8))
        assert check_gradients(lambda: ops.sum(lrt.channel_attention(x, w1, w2) * R), [x, w1, w2]) < 1e-4


# --------------------------------------------------------------- window attention


def test_window_partition_round_trip(rng):
    x = Tensor(rng.standard_normal((2, 8, 16, 3)))
    t = lrt.window_partition(x, 4)
    assert t.shape == (16, 16, 3)
    assert np.array_equal(lrt.window_reverse(t, 4, 2, 8, 16).data, x.data)


def test_window_indivisible(rng):
    with pytest.raises(ValueError):
        lrt.window_partition(Tensor(np.zeros((1, 12, 8, 2))), 8)


def test_window_msa_loop_oracle(rng):
    p = msa_params(rng)
    x = rng.standard_normal((1, 16, 8, 8))
    with default_dtype(np.float64):
        got = lrt.window_msa(Tensor(x), p, 8, 2).data
    assert np.abs(got - loop_window_msa(x, p, 8, 2)).max() < 1e-5


def test_single_window_is_global_attention(rng):
    p = msa_params(rng)
    x = rng.standard_normal((1, 4, 4, 8))
    with default_dtype(np.float64):
        got = lrt.window_msa(Tensor(x), p, 4, 2).data[0].reshape(16, 8)
    t = x[0].reshape(16, 8)
    qkv = t @ p["qkv.w"].data + p["qkv.b"].data
    heads = []
    for h in range(2):
        q, k, v = (qkv[:, j * 8 + h * 4: j * 8 + h * 4 + 4] for j in range(3))
        a = q @ k.T / 2.0
        a = np.exp(a - a.max(-1, keepdims=True))
        heads.append(a / a.sum(-1, keepdims=True) @ v)
    ref = np.concatenate(heads, -1) @ p["proj.w"].data + p["proj.b"].data
    assert np.abs(got - ref).max() < 1e-10


def test_window_locality(rng):
    p = msa_params(rng)
    x = rng.standard_normal((1, 16, 16, 8))
    y = x.copy()
    y[:, 8:, :] += rng.standard_normal((1, 8, 16, 8))
    y[:, :, 8:] += rng.standard_normal((1, 16, 8, 8))
    a, b = lrt.window_msa(Tensor(x), p, 8, 2).data, lrt.window_msa(Tensor(y), p, 8, 2).data
    assert np.array_equal(a[:, :8, :8], b[:, :8, :8])
    assert not np.array_equal(a[:, 8:, 8:], b[:, 8:, 8:])


def test_window_msa_gradient(rng):
    with default_dtype(np.float64):
        p = msa_params(rng, D=4, heads=2)
        x = parameter(rng.standard_normal((1, 8, 8, 4)))
        R = rng.standard_normal((1, 8, 8, 4))
        assert check_gradients(lambda: ops.sum(lrt.window_msa(x, p, 4, 2) * R), [x, *p.values()]) < 1e-4


# --------------------------------------------------------------- reconstruct


@pytest.fixture
def small():
    cfg = ModelConfig(D=8, lrt_heads=2, window=4, depth=2)
    p = lrt.init_params(np.random.default_rng(0), cfg, 10)
    return cfg, p


def test_output_range_and_shape(small, rng):
    cfg, p = small
    out = lrt.reconstruct(Tensor(rng.standard_normal((1, 10, 8, 8)) * 100), p, cfg).data
    assert out.shape == (1, 3, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_both_branches_live(small, rng):
    cfg, p = small
    x = Tensor(rng.standard_normal((1, 10, 8, 8)))
    both = lrt.reconstruct(x, p, cfg).data
    assert np.linalg.norm(both - lrt.reconstruct(x, p, cfg, msa=False).data) > 0
    assert np.linalg.norm(both - lrt.reconstruct(x, p, cfg, ca=False).data) > 0


def test_every_leaf_gets_gradient(rng):
    # default widths: a 2-unit channel bottleneck can start with both relus dead
    cfg = ModelConfig()
    p = lrt.init_params(rng, cfg, 100)
    x = Tensor(rng.standard_normal((1, 100, 16, 16)))
    R = rng.standard_normal((1, 3, 32, 32))
    p.zero_grad()
    with Graph() as g:
        g.backward(ops.sum(lrt.reconstruct(x, p, cfg) * R))
    for k, v in p.items():
        assert v.grad is not None and np.any(v.grad != 0), k


def test_reconstruct_gradient(rng):
    cfg = ModelConfig(D=4, lrt_heads=2, window=4, depth=1, ca_reduction=2)
    with default_dtype(np.float64):
        p = lrt.init_params(rng, cfg, 3)
        x = parameter(rng.standard_normal((1, 3, 4, 4)))
        R = rng.standard_normal((1, 3, 8, 8))
        assert check_gradients(lambda: ops.sum(lrt.reconstruct(x, p, cfg) * R), [x, *p.values()]) < 1e-4


def test_in_proj_shape_mismatch(small, rng):
    cfg, p = small
    with pytest.raises(Exception):
        lrt.reconstruct(Tensor(rng.standard_normal((1, 7, 8, 8))), p, cfg)
