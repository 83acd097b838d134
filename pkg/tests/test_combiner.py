import numpy as np
import pytest

from poseaug import tensor as T
from poseaug.combiner import (Combiner, CombinerConfig, attention, fuse,
                              fuse_geometry, multi_head, patchify)
from poseaug.errors import ConfigError, ShapeError
from poseaug.tensor import Tensor


@pytest.fixture
def small_config():
    return CombinerConfig(face_dim=64, pose_dim=64, patch=4, heads=2,
                          layers=2, model_dim=32, ff_dim=32, dropout=0.4)


@pytest.fixture
def model(small_config, rng):
    return Combiner(small_config, rng)


class TestFuse:
    def test_default_geometry_is_square(self):
        assert fuse_geometry(512, 512, 8) == (32, 32)

    def test_layout_face_then_pose(self, rng):
        face = Tensor(rng.normal(size=(1, 512)))
        pose = Tensor(rng.normal(size=(1, 512)))
        m = fuse(face, pose, 32, 32)
        assert m.data[0, 0, 0] == face.data[0, 0]
        assert m.data[0, 16, 0] == pose.data[0, 0]  # row 16 starts at index 512

    def test_zero_inputs_zero_matrix(self):
        m = fuse(Tensor(np.zeros((1, 512))), Tensor(np.zeros((1, 512))), 32, 32)
        assert not m.data.any()

    def test_flatten_roundtrip(self, rng):
        face = Tensor(rng.normal(size=(1, 24)))
        pose = Tensor(rng.normal(size=(1, 24)))
        m = fuse(face, pose, 8, 6)
        flat = m.data.reshape(1, -1)
        np.testing.assert_array_equal(
            flat, np.concatenate([face.data, pose.data], axis=1))

    def test_unfactorable_length_lists_options(self):
        with pytest.raises(ConfigError, match="factorization"):
            fuse_geometry(7, 6, 8)


class TestPatchify:
    def test_patch_grid_shape(self, rng):
        m = Tensor(rng.normal(size=(1, 32, 32)))
        tokens = patchify(m, 8)
        assert tokens.shape == (1, 16, 64)

    def test_single_patch(self, rng):
        m = Tensor(rng.normal(size=(1, 8, 8)))
        tokens = patchify(m, 8)
        np.testing.assert_array_equal(tokens.data[0, 0], m.data[0].reshape(-1))

    def test_reassembly_roundtrip(self, rng):
        m = rng.normal(size=(1, 16, 16))
        tokens = patchify(Tensor(m), 4).data[0]
        rebuilt = np.zeros((16, 16))
        for t, token in enumerate(tokens):
            bi, bj = divmod(t, 4)
            rebuilt[bi * 4:(bi + 1) * 4, bj * 4:(bj + 1) * 4] = \
                token.reshape(4, 4)
        np.testing.assert_array_equal(rebuilt, m[0])

    def test_divisibility_failure(self, rng):
        with pytest.raises(ConfigError, match="divide"):
            patchify(Tensor(rng.normal(size=(1, 10, 10))), 4)


class TestAttention:
    def test_single_key_forces_weights_to_one(self, rng):
        q = Tensor(rng.normal(size=(4, 8)))
        k = Tensor(rng.normal(size=(1, 8)))
        v = Tensor(rng.normal(size=(1, 8)))
        out = attention(q, k, v)
        for row in out.data:
            np.testing.assert_allclose(row, v.data[0], atol=1e-12)

    def test_zero_scores_give_column_means(self, rng):
        q = Tensor(np.zeros((3, 8)))
        k = Tensor(np.zeros((5, 8)))
        v = Tensor(rng.normal(size=(5, 8)))
        out = attention(q, k, v)
        for row in out.data:
            np.testing.assert_allclose(row, v.data.mean(axis=0), atol=1e-12)

    def test_matches_direct_evaluation(self, rng):
        q = rng.normal(size=(4, 8))
        k = rng.normal(size=(4, 8))
        v = rng.normal(size=(4, 8))
        scores = q @ k.T / np.sqrt(8)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        expected = (e / e.sum(axis=1, keepdims=True)) @ v
        out = attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.abs((out - expected) / expected).max() < 1e-10

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                      Tensor(np.zeros((2, 4))))

    def test_convex_combination_envelope(self, rng):
        q = Tensor(rng.normal(size=(6, 8)))
        k = Tensor(rng.normal(size=(5, 8)))
        v = Tensor(rng.normal(size=(5, 8)))
        out = attention(q, k, v).data
        lo = v.data.min(axis=0) - 1e-12
        hi = v.data.max(axis=0) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)


class TestMultiHead:
    def test_single_head_identity_wo_equals_attention(self, rng):
        x = Tensor(rng.normal(size=(5, 8)))
        wq = Tensor(rng.normal(size=(8, 8)))
        wk = Tensor(rng.normal(size=(8, 8)))
        wv = Tensor(rng.normal(size=(8, 8)))
        out = multi_head(x, [(wq, wk, wv)], Tensor(np.eye(8)))
        expected = attention(T.matmul(x, wq), T.matmul(x, wk), T.matmul(x, wv))
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    def test_zero_value_projection_gives_zero(self, rng):
        x = Tensor(rng.normal(size=(5, 8)))
        heads = [(Tensor(rng.normal(size=(8, 4))),
                  Tensor(rng.normal(size=(8, 4))),
                  Tensor(np.zeros((8, 4)))) for _ in range(2)]
        out = multi_head(x, heads, Tensor(rng.normal(size=(8, 8))))
        assert not out.data.any()

    def test_head_dim_from_config(self):
        config = CombinerConfig()
        assert config.heads == 4 and config.model_dim == 256
        assert config.head_dim == 64


class TestForward:
    def test_unit_norm_output(self, model, rng):
        face = Tensor(rng.normal(size=(3, 64)) * 100)
        pose = Tensor(rng.normal(size=(3, 64)) * 100)
        out = model.forward(face, pose)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0,
                                   atol=1e-6)

    def test_inference_deterministic(self, model, rng):
        face = Tensor(rng.normal(size=(2, 64)))
        pose = Tensor(rng.normal(size=(2, 64)))
        a = model.forward(face, pose).data
        b = model.forward(face, pose).data
        np.testing.assert_array_equal(a, b)

    def test_train_mode_requires_rng(self, model, rng):
        face = Tensor(rng.normal(size=(2, 64)))
        pose = Tensor(rng.normal(size=(2, 64)))
        with pytest.raises(ConfigError, match="rng"):
            model.forward(face, pose, train_mode=True)

    def test_dim_mismatch(self, model, rng):
        with pytest.raises(ConfigError, match="dims"):
            model.forward(Tensor(rng.normal(size=(2, 32))),
                          Tensor(rng.normal(size=(2, 64))))

    def test_no_nan_for_large_inputs(self, model, rng):
        face = Tensor(rng.uniform(-1e3, 1e3, size=(2, 64)))
        pose = Tensor(rng.uniform(-1e3, 1e3, size=(2, 64)))
        assert np.all(np.isfinite(model.forward(face, pose).data))

    def test_attention_rows_sum_to_one(self, model, rng):
        face = Tensor(rng.normal(size=(2, 64)))
        pose = Tensor(rng.normal(size=(2, 64)))
        probe = []
        model.forward(face, pose, attention_probe=probe)
        assert len(probe) == 2  # one record per layer
        for weights in probe:
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_permutation_invariance_with_zero_positional(self, small_config, rng):
        model = Combiner(small_config, rng)
        model.positional.data[:] = 0.0
        face = Tensor(rng.normal(size=(1, 64)))
        pose = Tensor(rng.normal(size=(1, 64)))
        base = model.forward(face, pose).data

        # permuting token order = permuting patch blocks of the fused matrix
        perm = rng.permutation(small_config.n_tokens)
        orig_patch_w = model.patch_w.data.copy()
        from poseaug.combiner import fuse, patchify
        tokens = patchify(fuse(face, pose, small_config.rows,
                               small_config.cols), small_config.patch)
        permuted_tokens = Tensor(tokens.data[:, perm, :])
        x = T.matmul(permuted_tokens, model.patch_w) + model.patch_b
        inv_sqrt = Tensor(1.0 / np.sqrt(small_config.head_dim))
        for blk in model.blocks:
            q = model._split_heads(T.matmul(x, blk["wq"]))
            k = model._split_heads(T.matmul(x, blk["wk"]))
            v = model._split_heads(T.matmul(x, blk["wv"]))
            w = T.softmax_rows(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * inv_sqrt)
            x = x + T.matmul(model._merge_heads(T.matmul(w, v)), blk["wo"])
            ff = T.relu(T.matmul(x, blk["ff1_w"]) + blk["ff1_b"])
            x = x + (T.matmul(ff, blk["ff2_w"]) + blk["ff2_b"])
        pooled = T.mean(x, axis=1)
        out = pooled @ model.head_w + model.head_b
        out = out * model.out_scale + model.out_shift
        permuted = T.l2_normalize(out).data
        np.testing.assert_allclose(permuted, base, atol=1e-9)
        np.testing.assert_array_equal(model.patch_w.data, orig_patch_w)
