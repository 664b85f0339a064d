import numpy as np
import pytest

from rcs.autodiff import ShapeError, Tape, finite_difference_gradient
from rcs.model import EncoderConfig, Model, load_checkpoint, save_checkpoint
from rcs.rng import philox_rng

from conftest import tiny_model


class TestConfig:
    def test_requires_hidden(self):
        with pytest.raises(ValueError, match="hidden"):
            EncoderConfig(input_dim=4, hidden=(), embedding_dim=4, projection_dim=2)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            EncoderConfig(input_dim=0, hidden=(4,), embedding_dim=4, projection_dim=2)

    def test_rejects_bad_normalization(self):
        with pytest.raises(ValueError, match="normalization"):
            EncoderConfig(input_dim=4, hidden=(4,), embedding_dim=4, projection_dim=2, normalization="bn")

    def test_param_count_hand_derived(self):
        # d=4 -> 8 -> 4 encoder plus a single-layer head 4 -> 2
        cfg = EncoderConfig(input_dim=4, hidden=(8,), embedding_dim=4, projection_dim=2)
        assert cfg.param_count() == (4 * 8 + 8) + (8 * 4 + 4) + (4 * 2 + 2) == 86
        assert cfg.head_param_count() == 4 * 2 + 2 == 10


class TestInit:
    def test_same_seed_bit_identical(self):
        a = tiny_model(seed=42)
        b = tiny_model(seed=42)
        assert np.array_equal(a.param_vector(), b.param_vector())

    def test_different_seeds_differ(self):
        a = tiny_model(seed=1)
        b = tiny_model(seed=2)
        assert np.any(a.param_vector() != b.param_vector())

    def test_biases_zero(self):
        m = tiny_model(seed=3)
        for w, b in m._encoder + m._head:
            assert np.array_equal(b.data, np.zeros_like(b.data))


class TestForward:
    def test_zero_weight_model_constant(self, rng):
        m = tiny_model(seed=0)
        m.set_param_vector(np.zeros(m.param_count()))
        out = m.forward(rng.standard_normal((5, 4))).data
        assert np.array_equal(out, np.zeros((5, 3)))

    def test_empty_batch(self):
        m = tiny_model()
        out = m.forward(np.zeros((0, 4)))
        assert out.data.shape == (0, 3)

    def test_shape_error(self):
        m = tiny_model()
        with pytest.raises(ShapeError, match="embed"):
            m.forward(np.zeros((2, 5)))

    def test_gradient_matches_finite_differences(self, rng):
        m = tiny_model(seed=5)
        x = rng.standard_normal((3, 4))
        with Tape() as tape:
            loss = m.forward(x).mean()
            tape.backward(loss, wrt=m.parameters())
        analytic = m.grad_vector()
        theta0 = m.param_vector()

        def f(vec):
            m.set_param_vector(vec)
            return m.forward(x).mean().item()

        fd = finite_difference_gradient(f, theta0, 1e-5)
        m.set_param_vector(theta0)
        assert np.max(np.abs(fd - analytic)) / max(np.max(np.abs(fd)), 1e-9) <= 1e-4

    def test_two_layer_head(self, rng):
        m = tiny_model(seed=1, head_layers=2)
        assert m.forward(rng.standard_normal((2, 4))).data.shape == (2, 3)
        # z->z relu layer plus z->v output layer
        assert m.config.head_param_count() == (4 * 4 + 4) + (4 * 3 + 3)


class TestSnapshot:
    def test_round_trip_bit_identical(self, rng):
        m = tiny_model(seed=7)
        x = rng.standard_normal((4, 4))
        before = m.forward(x).data
        snap = m.snapshot()
        restored = snap.restore()
        assert np.array_equal(restored.forward(x).data, before)

    def test_restore_after_update(self, rng):
        m = tiny_model(seed=7)
        x = rng.standard_normal((4, 4))
        snap = m.snapshot()
        before = m.forward(x).data
        m.set_param_vector(m.param_vector() + 0.1)  # a "training step"
        assert not np.array_equal(m.forward(x).data, before)
        m.load_snapshot(snap)
        assert np.array_equal(m.forward(x).data, before)

    def test_double_snapshot_equal(self):
        m = tiny_model(seed=9)
        assert np.array_equal(m.snapshot().params, m.snapshot().params)

    def test_snapshot_norm_matches_live(self):
        m = tiny_model(seed=9)
        assert np.linalg.norm(m.snapshot().params) == np.linalg.norm(m.param_vector())

    def test_snapshot_is_by_value(self, rng):
        m = tiny_model(seed=7)
        snap = m.snapshot()
        frozen = snap.params.copy()
        m.set_param_vector(m.param_vector() * 2.0)
        assert np.array_equal(snap.params, frozen)

    def test_config_mismatch_rejected(self):
        snap = tiny_model(seed=1).snapshot()
        other = tiny_model(seed=1, hidden=(8,))
        with pytest.raises(ValueError, match="config"):
            other.load_snapshot(snap)


class TestHeadView:
    def test_head_size(self):
        m = tiny_model()
        sl = m.head_slice()
        assert sl.stop - sl.start == m.config.head_param_count()

    def test_full_minus_head_is_encoder(self):
        m = tiny_model()
        cfg = m.config
        enc, _ = cfg.layer_dims()
        encoder_count = sum(i * o + o for i, o in enc)
        assert cfg.param_count() - cfg.head_param_count() == encoder_count

    def test_head_grads_are_tail_of_full_gradient(self, rng):
        m = tiny_model(seed=2)
        with Tape() as tape:
            loss = m.forward(rng.standard_normal((3, 4))).sum()
            tape.backward(loss, wrt=m.parameters())
        full = m.grad_vector()
        head = m.grad_vector(last_layer=True)
        assert np.array_equal(head, full[m.head_slice()])


class TestNormalization:
    def test_dual_branches_are_independent(self, rng):
        m = tiny_model(seed=3, normalization="dual-per-feature")
        x = rng.standard_normal((6, 4))
        nat_before = tuple(a.copy() for a in m._stats["natural"])
        m.forward(x, branch="adversarial", update_stats=True)
        assert np.array_equal(m._stats["natural"][0], nat_before[0])
        assert np.array_equal(m._stats["natural"][1], nat_before[1])
        adv_after = tuple(a.copy() for a in m._stats["adversarial"])
        m.forward(x, branch="natural", update_stats=True)
        assert np.array_equal(m._stats["adversarial"][0], adv_after[0])
        assert np.array_equal(m._stats["adversarial"][1], adv_after[1])

    def test_shared_mode_updates_both_branches(self, rng):
        m = tiny_model(seed=3, normalization="per-feature")
        x = rng.standard_normal((6, 4))
        m.forward(x, branch="adversarial", update_stats=True)
        a = m.forward(x, branch="natural").data
        b = m.forward(x, branch="adversarial").data
        assert np.array_equal(a, b)

    def test_stats_constant_without_update_flag(self, rng):
        m = tiny_model(seed=3, normalization="per-feature")
        x = rng.standard_normal((6, 4))
        before = tuple(a.copy() for a in m._stats["shared"])
        m.forward(x)
        assert np.array_equal(m._stats["shared"][0], before[0])

    def test_invalid_branch(self):
        m = tiny_model(normalization="dual-per-feature")
        with pytest.raises(ValueError, match="branch"):
            m.forward(np.zeros((1, 4)), branch="test")


def test_lipschitz_smoke(rng):
    """h is empirically Lipschitz near sampled points: one constant, estimated
    once per model, bounds output motion for fresh small perturbations."""
    m = tiny_model(seed=11)
    x = rng.standard_normal((8, 4))
    base = m.forward(x).data
    estimates = []
    for _ in range(10):
        delta = 1e-3 * rng.standard_normal(x.shape)
        moved = m.forward(x + delta).data
        estimates.append(np.linalg.norm(moved - base) / np.linalg.norm(delta))
    c = 2.0 * max(estimates)
    for _ in range(20):
        delta = 1e-3 * rng.standard_normal(x.shape)
        moved = m.forward(x + delta).data
        assert np.linalg.norm(moved - base) <= c * np.linalg.norm(delta)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        m = tiny_model(seed=13, normalization="per-feature")
        m.forward(rng.standard_normal((5, 4)), update_stats=True)
        path = tmp_path / "model.rcsm"
        save_checkpoint(path, m)
        loaded = load_checkpoint(path)
        assert loaded.config == m.config
        # parameters survive the f32 round trip
        assert np.array_equal(
            loaded.param_vector(), m.param_vector().astype("<f4").astype(np.float64)
        )
        assert np.allclose(loaded._stats["shared"][0], m._stats["shared"][0], atol=1e-12)

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "model.rcsm"
        save_checkpoint(path, tiny_model())
        assert path.read_bytes()[:4] == b"RCSM"

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.rcsm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.rcsm", tmp_path / "b.rcsm"
        save_checkpoint(a, tiny_model(seed=21))
        save_checkpoint(b, tiny_model(seed=21))
        assert a.read_bytes() == b.read_bytes()

    def test_params_little_endian_f32(self, tmp_path):
        import json
        import struct

        m = tiny_model(seed=4)
        path = tmp_path / "m.rcsm"
        save_checkpoint(path, m)
        raw = path.read_bytes()
        assert struct.unpack("<I", raw[4:8])[0] == 1  # version
        (jlen,) = struct.unpack("<I", raw[8:12])
        json.loads(raw[12 : 12 + jlen])  # config block parses
        params = np.frombuffer(raw[12 + jlen :], dtype="<f4")
        assert params.size == m.param_count()
