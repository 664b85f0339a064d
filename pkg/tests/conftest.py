import numpy as np
import pytest

from rcs.attack import AttackConfig
from rcs.model import EncoderConfig, Model
from rcs.rng import philox_rng


@pytest.fixture
def rng():
    return philox_rng(1234, "tests")


def tiny_model(seed=0, d=4, hidden=(6,), z=4, v=3, normalization="none", head_layers=1):
    return Model(
        EncoderConfig(
            input_dim=d,
            hidden=hidden,
            embedding_dim=z,
            projection_dim=v,
            normalization=normalization,
            head_layers=head_layers,
            seed=seed,
        )
    )


def small_attack(steps=2, eps=0.05, step=None):
    return AttackConfig(steps=steps, step_size=step if step is not None else eps / 2, eps=eps)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


def smoothness_margins(model, x):
    """(min |relu pre-activation|, min projection row norm) for a batch.

    Finite-difference gradient checks are only meaningful away from relu
    kinks and away from zero-norm projections (where normalization is not
    differentiable), mirroring how the non-smooth primitives are tested.
    """
    t = np.atleast_2d(np.asarray(x, dtype=np.float64))
    kink = np.inf
    for w, b in model._encoder[:-1]:
        pre = t @ w.data + b.data
        kink = min(kink, float(np.min(np.abs(pre))))
        t = np.maximum(pre, 0.0)
    w, b = model._encoder[-1]
    z = t @ w.data + b.data
    if len(model._head) == 2:
        w0, b0 = model._head[0]
        pre = z @ w0.data + b0.data
        kink = min(kink, float(np.min(np.abs(pre))))
        z = np.maximum(pre, 0.0)
    w, b = model._head[-1]
    proj = z @ w.data + b.data
    return kink, float(np.min(np.linalg.norm(proj, axis=1)))


def smooth_views(model, rng, n, min_kink=2e-3, min_norm=5e-2, tries=200):
    """Draw a view batch at which the model is locally smooth."""
    d = model.config.input_dim
    for _ in range(tries):
        x = rng.standard_normal((n, d))
        kink, norm = smoothness_margins(model, x)
        if kink > min_kink and norm > min_norm:
            return x
    raise RuntimeError("could not find a smooth batch for this model")


def is_smooth(model, batches, min_kink=2e-4, min_norm=5e-2) -> bool:
    for x in batches:
        kink, norm = smoothness_margins(model, x)
        if kink <= min_kink or norm <= min_norm:
            return False
    return True


def find_smooth_instance(base_seed, build, tries=100):
    """Deterministically scan seeds until ``build`` yields a smooth instance.

    ``build(seed)`` returns (payload, model, batches-to-check) or None.
    """
    for k in range(tries):
        built = build(base_seed + 1000 * k)
        if built is None:
            continue
        payload, model, batches = built
        if is_smooth(model, batches):
            return payload
    raise RuntimeError("no smooth instance found")
