import numpy as np
import pytest

from ift import fgps, scene, training
from ift.autodiff import Tensor, default_dtype, no_grad, ops, parameter
from ift.autodiff.gradcheck import analytic_grads, check_gradients
from ift.checks import brute_force_position_map
from ift.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def params(rng):
    return fgps.init_params(rng, ModelConfig())


def frames(*imgs):
    return [Tensor(np.asarray(x, np.float32)[None]) for x in imgs]


# --------------------------------------------------------------- similarity


def test_self_similarity_diagonal(rng):
    Q = rng.standard_normal((10, 6))
    with default_dtype(np.float64):
        M = fgps.similarity(Tensor(Q), Tensor(Q)).data
    assert np.allclose(np.diag(M), 1.0, atol=1e-12)
    assert np.all(M.argmax(-1) == np.arange(10))


def test_orthogonal_tokens_zero():
    with default_dtype(np.float64):
        M = fgps.similarity(Tensor(np.eye(3)), Tensor(np.eye(3)[::-1])).data
    assert M[0, 0] == 0.0 and M[0, 2] == pytest.approx(1.0)


def test_similarity_loop_oracle(rng):
    Q, K = rng.standard_normal((32, 16)), rng.standard_normal((32, 16))
    with default_dtype(np.float64):
        M = fgps.similarity(Tensor(Q), Tensor(K)).data
    loop = np.array([[q @ k / np.sqrt((q @ q) * (k @ k)) for k in K] for q in Q])
    assert np.abs(M - loop).max() < 1e-6


def test_similarity_zero_rows_guarded():
    with default_dtype(np.float64):
        M = fgps.similarity(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))).data
    assert np.all(np.isfinite(M)) and np.all(M == 0)


def test_cosine_bounds(rng):
    Q = rng.standard_normal((64, 8)) * rng.uniform(1e-3, 1e3, (64, 1))
    K = np.concatenate([Q[:32], -Q[:32]])
    M = fgps.similarity(Tensor(Q), Tensor(K)).data
    assert M.min() >= -1 - 1e-6 and M.max() <= 1 + 1e-6


def test_similarity_gradient(rng):
    with default_dtype(np.float64):
        Q, K = parameter(rng.standard_normal((5, 4))), parameter(rng.standard_normal((6, 4)))
        R = rng.standard_normal((5, 6))
        assert check_gradients(lambda: ops.sum(fgps.similarity(Q, K) * R), [Q, K]) < 1e-6


# --------------------------------------------------------------- position map


def test_position_map_diagonal_dominant(rng):
    M = rng.uniform(-0.5, 0.5, (8, 8)) + 2 * np.eye(8)
    assert np.array_equal(fgps.position_map(M), np.arange(8))


def test_position_map_permuted_maxima(rng):
    perm = rng.permutation(12)
    M = rng.uniform(-0.5, 0.5, (12, 12))
    M[np.arange(12), perm] = 0.9
    assert np.array_equal(fgps.position_map(M), perm)


def test_position_map_tie_lowest_index():
    M = np.full((3, 5), 0.25)
    M[1, [2, 4]] = 0.5
    assert list(fgps.position_map(M)) == [0, 2, 0]


def test_position_map_brute_force(rng):
    for _ in range(10):
        n, d = int(rng.integers(2, 200)), int(rng.integers(2, 20))
        Q, K = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        K[n // 2:] = K[: n - n // 2]
        with default_dtype(np.float64):
            P = fgps.position_map(fgps.similarity(Tensor(Q), Tensor(K)))
        assert list(P) == brute_force_position_map(Q, K)


def test_position_map_scale_invariance(rng):
    Q, K = rng.standard_normal((40, 8)), rng.standard_normal((40, 8))
    with default_dtype(np.float64):
        base = fgps.position_map(fgps.similarity(Tensor(Q), Tensor(K)))
        for c in (1e-3, 7.0, 1e4):
            assert np.array_equal(base, fgps.position_map(fgps.similarity(Tensor(Q), Tensor(K * c))))
            assert np.array_equal(base, fgps.position_map(fgps.similarity(Tensor(Q * c), Tensor(K))))


# --------------------------------------------------------------- features and tokens


def test_feature_shapes(params):
    cfg = ModelConfig()
    f = fgps.extract_features(frames(*np.random.default_rng(0).uniform(0, 1, (3, 3, 64, 64))), params, cfg)
    assert [x.shape for x in f] == [(1, 64, 8, 8)] * 3
    assert fgps.token_grid(64, 64, cfg) == (4, 4)


def test_identical_frames_identical_features(params):
    x = np.random.default_rng(0).uniform(0, 1, (3, 32, 32))
    f1, f2, _ = fgps.extract_features(frames(x, x, x), params, ModelConfig())
    assert np.array_equal(f1.data, f2.data)


def test_zero_input_bias_constant_interior(params):
    # padding breaks translation invariance at the border, so only the interior is constant
    f = fgps.extract_features(frames(*np.zeros((3, 3, 128, 128))), params, ModelConfig())[0].data[0]
    inner = f[:, 2:-2, 2:-2]
    assert np.allclose(inner, inner[:, :1, :1], atol=1e-6)


def test_search_resolution_caps_token_count(params):
    cfg = ModelConfig()
    assert fgps.token_grid(256, 256, cfg) == fgps.token_grid(512, 512, cfg)
    gh, gw = fgps.token_grid(512, 512, cfg)
    assert gh * gw <= 1024


def test_search_resolution_indivisible():
    with pytest.raises(ValueError):
        fgps.extract_features(frames(*np.zeros((3, 3, 20, 20))), fgps.init_params(np.random.default_rng(0), ModelConfig()), ModelConfig())


@pytest.mark.parametrize("patch,n", [(8, 1), (1, 64), (2, 16)])
def test_embed_token_counts(rng, patch, n):
    f = Tensor(rng.standard_normal((1, 4, 8, 8)))
    w = Tensor(rng.standard_normal((4 * patch * patch, 5)))
    assert fgps.embed_tokens(f, w, patch).shape == (1, n, 5)


def test_embed_indivisible(rng):
    with pytest.raises(ValueError):
        fgps.embed_tokens(Tensor(rng.standard_normal((1, 4, 6, 6))), Tensor(np.ones((64, 2))), 4)


# --------------------------------------------------------------- run_fgps


def test_static_scene_identity_maps(params):
    s = scene.generate(scene.SceneSpec(seed=3, motion_px=0, evs=(0.0, 0.0, 0.0)))
    with no_grad():
        P_L, P_H, _, _ = fgps.run_fgps(frames(*s.stack.G), params, ModelConfig())
    assert np.array_equal(P_L[0], np.arange(16)) and np.array_equal(P_H[0], np.arange(16))


def test_swapping_identical_frames(params):
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (2, 3, 64, 64))
    with no_grad():
        r1 = fgps.run_fgps(frames(a, b, a), params, ModelConfig())
        r2 = fgps.run_fgps(frames(a, b, a), params, ModelConfig())
    assert np.array_equal(r1[0], r2[1]) and np.array_equal(r1[2].data, r2[3].data)


def test_permutation_recovery(params):
    rng = np.random.default_rng(2)
    for _ in range(5):
        ref, sup, perm = training.permutation_scene(rng)
        with no_grad():
            P_L, P_H, _, _ = fgps.run_fgps(frames(sup, ref, sup), params, ModelConfig())
        assert np.array_equal(P_L[0], perm) and np.array_equal(P_H[0], perm)


def test_rescale_position_map():
    fine = fgps.rescale_position_map([1, 0], (1, 2), 2)
    # coarse token 0 reads coarse 1; each 2x2 block keeps its offsets
    assert list(fine) == [2, 3, 0, 1, 6, 7, 4, 5]
    assert np.array_equal(fgps.rescale_position_map(np.arange(4), (2, 2), 3), np.arange(36))
    with pytest.raises(ValueError):
        fgps.rescale_position_map([0, 1, 2], (2, 2), 2)


# --------------------------------------------------------------- STE


def test_ste_forward_is_gather(rng):
    f, M = Tensor(rng.standard_normal((6, 5))), Tensor(rng.standard_normal((6, 6)))
    assert np.array_equal(fgps.ste_gather(f, M).data, f.data[fgps.position_map(M)])


def test_ste_backward_matches_surrogate(rng):
    with default_dtype(np.float64):
        f, M = parameter(rng.standard_normal((6, 5))), parameter(rng.standard_normal((6, 6)))
        R = rng.standard_normal((6, 5))
        for tau in (1.0, 0.3):
            ste = analytic_grads(lambda: ops.sum(fgps.ste_gather(f, M, tau) * R), [f, M])
            soft = analytic_grads(lambda: ops.sum(fgps.soft_gather(f, M, tau) * R), [f, M])
            for a, b in zip(ste, soft):
                assert np.abs(a - b).max() < 1e-6


def test_surrogate_finite_differences(rng):
    with default_dtype(np.float64):
        f, M = parameter(rng.standard_normal((6, 5))), parameter(rng.standard_normal((6, 6)))
        R = rng.standard_normal((6, 5))
        assert check_gradients(lambda: ops.sum(fgps.soft_gather(f, M) * R), [f, M]) < 1e-4


def test_low_temperature_gradient_is_scatter(rng):
    perm = rng.permutation(8)
    M = np.full((8, 8), -0.2)
    M[np.arange(8), perm] = 0.9
    R = rng.standard_normal((8, 3))
    with default_dtype(np.float64):
        f = parameter(rng.standard_normal((8, 3)))
        (g,) = analytic_grads(lambda: ops.sum(fgps.ste_gather(f, Tensor(M), 1e-3) * R), [f])
    hard = np.zeros_like(R)
    np.add.at(hard, perm, R)
    assert np.abs(g - hard).max() < 1e-12


def test_ste_rejects_temperature():
    with pytest.raises(ValueError):
        fgps.ste_gather(np.ones((2, 2)), np.eye(2), 0.0)


def test_ste_reaches_feature_extractor(params):
    rng = np.random.default_rng(4)
    G = frames(*rng.uniform(0, 1, (3, 3, 64, 64)))
    f = Tensor(rng.standard_normal((1, 16, 8)))
    R = rng.standard_normal((1, 16, 8))

    def loss():
        M_L = fgps.run_fgps(G, params, ModelConfig())[2]
        return ops.sum(fgps.ste_gather(f, M_L) * R)

    grads = analytic_grads(loss, [params["fe.0.w"], params["varphi.w"], params["phi.w"]])
    assert all(np.any(g != 0) for g in grads)
