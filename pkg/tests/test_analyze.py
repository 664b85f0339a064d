import math

import numpy as np
import pytest

from rcs.analyze import (
    imbalance_ratio,
    linear_probe,
    median_bandwidth,
    mmd,
    robust_loss,
    selection_frequency,
)
from rcs.attack import AttackConfig
from rcs.config import ExperimentConfig
from rcs.data import DatasetSpec, generate
from rcs.rng import philox_rng
from rcs.selection import MinibatchPartition, random_select
from rcs.trainer import pretrain

from conftest import small_attack, tiny_model


class TestMmd:
    def test_self_distance_zero(self, rng):
        a = rng.standard_normal((10, 3))
        assert mmd(a, a) <= 1e-12

    def test_singletons_hand_formula(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])  # distance 5
        h = 2.0
        expected = 2.0 - 2.0 * math.exp(-25.0 / (2.0 * h * h))
        assert mmd(a, b, bandwidth=h) == pytest.approx(expected, abs=1e-12)

    def test_separated_clouds_beat_same_distribution(self):
        wins = 0
        for seed in range(20):
            r = philox_rng(seed, "mmd")
            a = r.standard_normal((30, 3))
            b = r.standard_normal((30, 3)) + 6.0
            c = r.standard_normal((30, 3))
            if mmd(a, b) > mmd(a, c):
                wins += 1
        assert wins == 20

    def test_exact_symmetry(self, rng):
        a = rng.standard_normal((12, 4))
        b = rng.standard_normal((7, 4))
        assert mmd(a, b) == mmd(b, a)
        assert mmd(a, b, bandwidth=1.7) == mmd(b, a, bandwidth=1.7)

    def test_nonnegative(self, rng):
        for _ in range(10):
            a = rng.standard_normal((8, 2))
            b = rng.standard_normal((9, 2))
            assert mmd(a, b) >= 0.0

    def test_default_bandwidth_is_pooled_median(self, rng):
        a = rng.standard_normal((6, 2))
        b = rng.standard_normal((5, 2))
        h = median_bandwidth(np.concatenate([a, b]))
        assert mmd(a, b) == mmd(a, b, bandwidth=h)

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="non-empty"):
            mmd(np.zeros((0, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError, match="dimension"):
            mmd(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="bandwidth"):
            mmd(np.zeros((2, 2)), np.ones((2, 2)), bandwidth=0.0)


class TestImbalance:
    def test_balanced(self):
        rep = imbalance_ratio(np.array([0, 0, 1, 1, 2, 2]))
        assert rep.ratio == 1.0 and not rep.has_missing

    def test_direct_definition(self):
        rep = imbalance_ratio(np.array([0] * 6 + [1] * 3))
        assert rep.ratio == 2.0

    def test_missing_class_is_flagged_infinity(self):
        rep = imbalance_ratio(np.array([0, 0, 2]), n_classes=3)
        assert math.isinf(rep.ratio)
        assert rep.missing == (1,)

    def test_random_selection_stays_roughly_balanced(self):
        ds = generate(DatasetSpec(n=256, dim=2, classes=4, seed=0))
        part = MinibatchPartition.create(np.arange(256), 8, rng=philox_rng(0, "p"))
        ratios = []
        for seed in range(100):
            result = random_select(part, 0.5, seed)
            pts = np.concatenate([part.batches[b] for b in result.selected])
            ratios.append(imbalance_ratio(ds.y[pts], n_classes=4).ratio)
        assert np.median(ratios) < 1.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            imbalance_ratio(np.array([], dtype=int))


class TestFrequency:
    def make(self, n=24, beta=4):
        part = MinibatchPartition.create(np.arange(n), beta, rng=philox_rng(3, "p"))
        return part

    def test_single_round_counts_binary(self):
        part = self.make()
        result = random_select(part, 0.5, 0)
        ids, counts = selection_frequency(part, [result])
        assert set(np.unique(counts)) <= {0, 1}
        assert counts.sum() == len(result.selected) * part.batch_size

    def test_point_in_every_round(self):
        part = self.make()
        results = [random_select(part, 1.0, s) for s in range(4)]
        ids, counts = selection_frequency(part, results)
        assert np.all(counts == 4)

    def test_counts_sum_identity(self):
        part = self.make(n=32, beta=4)
        rounds = [random_select(part, 0.5, s) for s in range(5)]
        _, counts = selection_frequency(part, rounds)
        budget = part.budget(0.5)
        assert counts.sum() == 5 * budget * 4

    def test_partition_mismatch_rejected(self):
        part = self.make()
        other = MinibatchPartition.create(np.arange(24), 4, rng=philox_rng(4, "p"))
        result = random_select(other, 0.5, 0)
        with pytest.raises(ValueError, match="partition"):
            selection_frequency(part, [result])


class TestProbe:
    def test_separable_data_reaches_full_accuracy(self):
        ds = generate(DatasetSpec(n=80, dim=4, classes=2, mean_scale=8.0, cov_scale=0.3, seed=2))
        m = tiny_model(seed=1, d=4, hidden=(8,), z=4, v=3)
        train_acc, test_acc = linear_probe(m, ds.x, ds.y, seed=0)
        assert train_acc == 1.0 and test_acc == 1.0

    def test_shuffled_labels_are_chance_level(self):
        ds = generate(DatasetSpec(n=2000, dim=6, classes=2, mean_scale=3.0, seed=3))
        y = philox_rng(7, "shuffle").permutation(ds.y)
        m = tiny_model(seed=2, d=6, hidden=(8,), z=4, v=3)
        _, test_acc = linear_probe(m, ds.x, y, seed=0)
        assert abs(test_acc - 0.5) <= 0.05

    def test_training_helps_over_random_encoder(self):
        """Median over seeds: probe on a briefly pretrained encoder is at
        least as good as on the matching untrained encoder."""
        diffs = []
        for seed in range(5):
            cfg = ExperimentConfig(
                seed=seed, dataset_n=96, dataset_dim=6, dataset_classes=3,
                model_hidden=(12,), model_embedding_dim=6, model_projection_dim=4,
                train_objective="acl", train_epochs=6, train_warmup_epochs=6,
                train_interval=1, train_fraction=1.0, train_batch_size=16,
                train_lr=0.05, attack_eps=0.03, attack_rho=0.015, attack_steps=2,
                selection_steps=1, validation_fraction=0.1, dataset_mean_scale=2.0,
            )
            res = pretrain(cfg)
            ds = res.dataset
            untrained = tiny_model(seed=cfg.resolved_model_seed(), d=6, hidden=(12,), z=6, v=4)
            _, acc_raw = linear_probe(untrained, ds.x, ds.y, seed=seed)
            _, acc_trained = linear_probe(res.model, ds.x, ds.y, seed=seed)
            diffs.append(acc_trained - acc_raw)
        assert np.median(diffs) >= 0.0

    def test_single_class_rejected(self, rng):
        m = tiny_model()
        with pytest.raises(ValueError, match="class"):
            linear_probe(m, rng.standard_normal((10, 4)), np.zeros(10, dtype=int))


def test_robust_loss_at_least_clean_loss(rng):
    from rcs.losses import cross_entropy

    m = tiny_model(seed=5)
    x = rng.standard_normal((8, 4))
    y = philox_rng(0, "rl").integers(0, 3, size=8)
    clean = cross_entropy(m.forward(x), y).item()
    robust = robust_loss(m, x, y, small_attack(steps=3, eps=0.1))
    assert robust >= clean - 1e-12
