"""MLP feature extractor with a projection head, snapshots, and checkpoint IO.

The composed map h(x) = project(embed(x)) is differentiable end to end.
Normalization between encoder and head is a simplified running-statistics
scheme: ``none`` (default), ``per-feature`` (one shared statistics set), or
``dual-per-feature`` (independent statistics per natural/adversarial branch,
selected by a branch flag). Statistics enter the forward pass as constants;
they are updated from batch moments only when explicitly requested.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, add, matmul, mul, relu, sub

_NORM_MODES = ("none", "per-feature", "dual-per-feature")
_BRANCHES = ("natural", "adversarial")
_STATS_MOMENTUM = 0.1
_STATS_EPS = 1e-5

CHECKPOINT_MAGIC = b"RCSM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden: tuple[int, ...]
    embedding_dim: int
    projection_dim: int
    normalization: str = "none"
    head_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, self.embedding_dim, self.projection_dim) + self.hidden
        if not self.hidden:
            raise ValueError("EncoderConfig: hidden widths must be non-empty")
        if any(d < 1 for d in dims):
            raise ValueError(f"EncoderConfig: all dimensions must be >= 1, got {dims}")
        if self.normalization not in _NORM_MODES:
            raise ValueError(f"EncoderConfig: normalization must be one of {_NORM_MODES}")
        if self.head_layers not in (1, 2):
            raise ValueError("EncoderConfig: head_layers must be 1 or 2")

    def layer_dims(self) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
        """(encoder, head) lists of (fan_in, fan_out) in declaration order."""
        enc_sizes = [self.input_dim, *self.hidden, self.embedding_dim]
        encoder = [(enc_sizes[i], enc_sizes[i + 1]) for i in range(len(enc_sizes) - 1)]
        if self.head_layers == 1:
            head = [(self.embedding_dim, self.projection_dim)]
        else:
            head = [
                (self.embedding_dim, self.embedding_dim),
                (self.embedding_dim, self.projection_dim),
            ]
        return encoder, head

    def param_count(self) -> int:
        enc, head = self.layer_dims()
        return sum(i * o + o for i, o in enc + head)

    def head_param_count(self) -> int:
        _, head = self.layer_dims()
        return sum(i * o + o for i, o in head)


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen by-value copy of parameters and normalization statistics."""

    config: EncoderConfig
    params: np.ndarray
    stats: dict = field(default_factory=dict)

    def restore(self) -> "Model":
        m = Model(self.config)
        m.set_param_vector(self.params)
        m._stats = {k: (mu.copy(), var.copy()) for k, (mu, var) in self.stats.items()}
        return m


class Model:
    """Encoder f (MLP with relu) composed with projection head g."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
        enc, head = config.layer_dims()
        self._encoder = [self._init_layer(rng, i, o) for i, o in enc]
        self._head = [self._init_layer(rng, i, o) for i, o in head]
        self._stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for key in self._stats_keys():
            self._stats[key] = (
                np.zeros(config.embedding_dim),
                np.ones(config.embedding_dim),
            )

    @staticmethod
    def _init_layer(rng, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        # scaled-uniform init: U(-a, a), a = sqrt(6 / (fan_in + fan_out)); zero bias
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)

    def _stats_keys(self) -> tuple[str, ...]:
        if self.config.normalization == "per-feature":
            return ("shared",)
        if self.config.normalization == "dual-per-feature":
            return _BRANCHES
        return ()

    def _stats_key(self, branch: str) -> str | None:
        if branch not in _BRANCHES:
            raise ValueError(f"branch must be one of {_BRANCHES}, got {branch!r}")
        if self.config.normalization == "none":
            return None
        return "shared" if self.config.normalization == "per-feature" else branch

    # ---- forward ---------------------------------------------------------

    def embed(self, x, branch: str = "natural", update_stats: bool = False) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.data.ndim != 2 or t.data.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"embed: expected (n, {self.config.input_dim}), got {tuple(t.data.shape)}"
            )
        for w, b in self._encoder[:-1]:
            t = relu(add(matmul(t, w), b))
        w, b = self._encoder[-1]
        t = add(matmul(t, w), b)
        key = self._stats_key(branch)
        if key is not None:
            if update_stats and t.data.shape[0] > 0:
                mu, var = self._stats[key]
                bm = t.data.mean(axis=0)
                bv = t.data.var(axis=0)
                m = _STATS_MOMENTUM
                self._stats[key] = ((1 - m) * mu + m * bm, (1 - m) * var + m * bv)
            mu, var = self._stats[key]
            inv = 1.0 / np.sqrt(var + _STATS_EPS)
            t = mul(sub(t, Tensor(mu)), Tensor(inv))
        return t

    def project(self, z) -> Tensor:
        t = z if isinstance(z, Tensor) else Tensor(z)
        if t.data.ndim != 2 or t.data.shape[1] != self.config.embedding_dim:
            raise ShapeError(
                f"project: expected (n, {self.config.embedding_dim}), got {tuple(t.data.shape)}"
            )
        if len(self._head) == 2:
            w, b = self._head[0]
            t = relu(add(matmul(t, w), b))
        w, b = self._head[-1]
        return add(matmul(t, w), b)

    def forward(self, x, branch: str = "natural", update_stats: bool = False) -> Tensor:
        return self.project(self.embed(x, branch=branch, update_stats=update_stats))

    __call__ = forward

    # ---- parameter access --------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self._encoder + self._head:
            out.extend((w, b))
        return out

    def head_parameters(self) -> list[Tensor]:
        out = []
        for w, b in self._head:
            out.extend((w, b))
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def head_slice(self) -> slice:
        """Indices of head parameters inside the flat parameter vector."""
        total = self.param_count()
        return slice(total - self.config.head_param_count(), total)

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count(),):
            raise ShapeError(
                f"set_param_vector: expected ({self.param_count()},), got {tuple(vec.shape)}"
            )
        off = 0
        for p in self.parameters():
            n = p.data.size
            p.data = vec[off : off + n].reshape(p.data.shape).copy()
            off += n

    def grad_vector(self, last_layer: bool = False) -> np.ndarray:
        parts = []
        for p in self.parameters():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            parts.append(np.asarray(g).ravel())
        full = np.concatenate(parts)
        return full[self.head_slice()] if last_layer else full

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # ---- snapshot / restore -------------------------------------------------

    def snapshot(self) -> ModelSnapshot:
        return ModelSnapshot(
            config=self.config,
            params=self.param_vector(),
            stats={k: (mu.copy(), var.copy()) for k, (mu, var) in self._stats.items()},
        )

    def load_snapshot(self, snap: ModelSnapshot) -> None:
        if snap.config != self.config:
            raise ValueError("load_snapshot: snapshot config does not match model config")
        self.set_param_vector(snap.params)
        self._stats = {k: (mu.copy(), var.copy()) for k, (mu, var) in snap.stats.items()}


# ---------------------------------------------------------------------------
# checkpoint format: magic "RCSM", version u32, length-prefixed JSON config
# block (config fields + normalization statistics), then parameters as
# little-endian float32 in declaration order.
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model) -> None:
    cfg = model.config
    block = {
        "input_dim": cfg.input_dim,
        "hidden": list(cfg.hidden),
        "embedding_dim": cfg.embedding_dim,
        "projection_dim": cfg.projection_dim,
        "normalization": cfg.normalization,
        "head_layers": cfg.head_layers,
        "seed": cfg.seed,
        "stats": {
            k: [mu.tolist(), var.tolist()] for k, (mu, var) in sorted(model._stats.items())
        },
    }
    payload = json.dumps(block, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = model.param_vector().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(params.tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (length,) = struct.unpack("<I", fh.read(4))
        block = json.loads(fh.read(length).decode("utf-8"))
        raw = fh.read()
    cfg = EncoderConfig(
        input_dim=block["input_dim"],
        hidden=tuple(block["hidden"]),
        embedding_dim=block["embedding_dim"],
        projection_dim=block["projection_dim"],
        normalization=block["normalization"],
        head_layers=block["head_layers"],
        seed=block["seed"],
    )
    model = Model(cfg)
    params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    model.set_param_vector(params)
    model._stats = {
        k: (np.asarray(mu, dtype=np.float64), np.asarray(var, dtype=np.float64))
        for k, (mu, var) in block.get("stats", {}).items()
    }
    return model
