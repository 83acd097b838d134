import numpy as np
import pytest

from poseaug.data import (BatchItem, SampleKey, generate_synthetic,
                          load_dataset, make_batch, save_dataset,
                          split_by_identity)
from poseaug.errors import ConfigError, InputError


class TestGenerateSynthetic:
    def test_full_scale_cardinality(self):
        ds = generate_synthetic(n_identities=140, n_emotions=7, n_poses=5,
                                embedding_dim=16, seed=0, image_size=16)
        assert len(ds.embeddings) == 4900
        assert len(ds.identities) == 140

    def test_deterministic_given_seed(self):
        a = generate_synthetic(n_identities=3, n_emotions=2, n_poses=2,
                               embedding_dim=8, noise_sigma=0.0, seed=5)
        b = generate_synthetic(n_identities=3, n_emotions=2, n_poses=2,
                               embedding_dim=8, noise_sigma=0.0, seed=5)
        for key in a.keys:
            np.testing.assert_array_equal(a.embeddings[key], b.embeddings[key])
            np.testing.assert_array_equal(a.landmarks[key].points,
                                          b.landmarks[key].points)

    def test_factor_oracle_matches_noiseless_embeddings(self):
        ds = generate_synthetic(n_identities=3, n_emotions=2, n_poses=2,
                                embedding_dim=32, noise_sigma=0.0, seed=2)
        for key in ds.keys:
            oracle = ds.factor_truth.target(*key)
            np.testing.assert_allclose(ds.embeddings[key], oracle, atol=1e-12)

    def test_counts_below_two_rejected(self):
        with pytest.raises(ConfigError, match="n_poses"):
            generate_synthetic(n_poses=1)

    def test_embeddings_unit_norm(self, tiny_dataset):
        for v in tiny_dataset.embeddings.values():
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_identity_correlation_dominates(self):
        ds = generate_synthetic(n_identities=6, n_emotions=3, n_poses=3,
                                embedding_dim=64, noise_sigma=0.0, seed=3)
        within, cross = [], []
        keys = ds.keys
        for i, ka in enumerate(keys):
            for kb in keys[i + 1:]:
                cos = float(ds.embeddings[ka] @ ds.embeddings[kb])
                (within if ka.identity == kb.identity else cross).append(cos)
        assert np.mean(within) > np.mean(cross) + 0.1


class TestRoundTrip:
    def test_save_load_round_trip(self, tiny_dataset, tmp_path):
        emb, lm = tmp_path / "e.csv", tmp_path / "l.csv"
        fac = tmp_path / "f.json"
        save_dataset(tiny_dataset, emb, lm, fac)
        loaded = load_dataset(emb, lm, fac, image_size=16)
        assert set(loaded.embeddings) == set(tiny_dataset.embeddings)
        for key in tiny_dataset.keys:
            np.testing.assert_allclose(loaded.embeddings[key],
                                       tiny_dataset.embeddings[key],
                                       atol=1e-12)
            np.testing.assert_allclose(loaded.landmarks[key].points,
                                       tiny_dataset.landmarks[key].points,
                                       atol=1e-12)
        assert loaded.factor_truth.alpha == tiny_dataset.factor_truth.alpha

    def test_save_deterministic_bytes(self, tiny_dataset, tmp_path):
        paths = [(tmp_path / f"e{i}.csv", tmp_path / f"l{i}.csv")
                 for i in range(2)]
        for e, l in paths:
            save_dataset(tiny_dataset, e, l)
        assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
        assert paths[0][1].read_bytes() == paths[1][1].read_bytes()

    def test_ragged_row_names_line(self, tiny_dataset, tmp_path):
        emb, lm = tmp_path / "e.csv", tmp_path / "l.csv"
        save_dataset(tiny_dataset, emb, lm)
        lines = emb.read_text().splitlines()
        lines[2] += ",0.5"  # line 3 of the file
        emb.write_text("\n".join(lines) + "\n")
        with pytest.raises(InputError, match=":3:"):
            load_dataset(emb, lm)

    def test_unjoined_keys_reported(self, tiny_dataset, tmp_path):
        emb, lm = tmp_path / "e.csv", tmp_path / "l.csv"
        save_dataset(tiny_dataset, emb, lm)
        lines = lm.read_text().splitlines()
        lm.write_text("\n".join(lines[:1]) + "\n")  # header only
        with pytest.raises(InputError, match="only one file"):
            load_dataset(emb, lm)

    def test_duplicate_key_rejected(self, tiny_dataset, tmp_path):
        emb, lm = tmp_path / "e.csv", tmp_path / "l.csv"
        save_dataset(tiny_dataset, emb, lm)
        lines = emb.read_text().splitlines()
        lines.append(lines[1])
        emb.write_text("\n".join(lines) + "\n")
        with pytest.raises(InputError, match="duplicate"):
            load_dataset(emb, lm)

    def test_loaded_embeddings_unit_norm(self, tiny_dataset, tmp_path):
        emb, lm = tmp_path / "e.csv", tmp_path / "l.csv"
        save_dataset(tiny_dataset, emb, lm)
        # scale a row; loader must renormalize
        lines = emb.read_text().splitlines()
        parts = lines[1].split(",")
        scaled = parts[:3] + [repr(float(x) * 7.0) for x in parts[3:]]
        lines[1] = ",".join(scaled)
        emb.write_text("\n".join(lines) + "\n")
        loaded = load_dataset(emb, lm)
        for v in loaded.embeddings.values():
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9


class TestSplit:
    def test_split_counts_honoured(self):
        ds = generate_synthetic(n_identities=140, n_emotions=2, n_poses=2,
                                embedding_dim=8, seed=0)
        split = split_by_identity(ds, (99, 11, 30), seed=1)
        assert len(split.train_identities) == 99
        assert len(split.val_identities) == 11
        assert len(split.test_identities) == 30
        all_ids = (set(split.train_identities) | set(split.val_identities)
                   | set(split.test_identities))
        assert all_ids == set(ds.identities)

    def test_degenerate_all_train(self, tiny_dataset):
        split = split_by_identity(tiny_dataset, (4, 0, 0), seed=0)
        assert set(split.train_identities) == set(tiny_dataset.identities)

    def test_deterministic(self, tiny_dataset):
        a = split_by_identity(tiny_dataset, (2, 1, 1), seed=9)
        b = split_by_identity(tiny_dataset, (2, 1, 1), seed=9)
        assert a == b

    def test_count_mismatch_rejected(self, tiny_dataset):
        with pytest.raises(ConfigError, match="sum"):
            split_by_identity(tiny_dataset, (3, 1, 1), seed=0)

    def test_disjointness_audit(self, tiny_dataset):
        split = split_by_identity(tiny_dataset, (2, 1, 1), seed=4)
        groups = [set(split.train_identities), set(split.val_identities),
                  set(split.test_identities)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not groups[i] & groups[j]


class TestMakeBatch:
    def test_two_poses_forced_target(self, tiny_dataset, tiny_split, rng):
        items, _ = make_batch(tiny_dataset, tiny_split.train_identities, 16, rng)
        for item in items:
            assert item.target_pose != item.base_key.pose

    def test_membership_respects_split(self, tiny_dataset, tiny_split, rng):
        items, _ = make_batch(tiny_dataset, tiny_split.train_identities, 32, rng)
        train = set(tiny_split.train_identities)
        for item in items:
            for key in (item.base_key, item.positive_key, item.neg_pose_key,
                        item.neg_identity_key, item.neg_emotion_key):
                assert key.identity in train

    def test_deterministic_given_seed(self, tiny_dataset, tiny_split):
        a, _ = make_batch(tiny_dataset, tiny_split.train_identities, 8,
                          np.random.default_rng(11))
        b, _ = make_batch(tiny_dataset, tiny_split.train_identities, 8,
                          np.random.default_rng(11))
        assert a == b

    def test_item_key_semantics(self, tiny_dataset, tiny_split, rng):
        items, _ = make_batch(tiny_dataset, tiny_split.train_identities, 8, rng)
        for it in items:
            assert it.positive_key == SampleKey(
                it.base_key.identity, it.base_key.emotion, it.target_pose)
            assert it.neg_identity_key.identity != it.base_key.identity
            assert it.neg_emotion_key.pose == it.target_pose

    def test_bad_batch_size(self, tiny_dataset, tiny_split, rng):
        with pytest.raises(ConfigError):
            make_batch(tiny_dataset, tiny_split.train_identities, 0, rng)
