"""Experiment configuration: flat ``key = value`` text files with dotted
keys, '#' comments, and a closed key set (unknown keys are usage errors).

Seeds of -1 for the dataset or model mean "derive from the run seed".
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .attack import AttackConfig, rcs_step_size
from .divergence import DistanceKind
from .model import EncoderConfig
from .selection import SelectionConfig


class ConfigError(ValueError):
    """Malformed configuration text or invalid key/value."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_intlist(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


# key -> (attribute, parser, default)
_SPEC: dict[str, tuple[str, object, object]] = {
    "seed": ("seed", int, 0),
    "dataset.n": ("dataset_n", int, 512),
    "dataset.dim": ("dataset_dim", int, 16),
    "dataset.classes": ("dataset_classes", int, 4),
    "dataset.mean_scale": ("dataset_mean_scale", float, 3.0),
    "dataset.cov_scale": ("dataset_cov_scale", float, 1.0),
    "dataset.seed": ("dataset_seed", int, -1),
    "dataset.path": ("dataset_path", str, ""),
    "model.hidden": ("model_hidden", _parse_intlist, (32,)),
    "model.embedding_dim": ("model_embedding_dim", int, 16),
    "model.projection_dim": ("model_projection_dim", int, 8),
    "model.normalization": ("model_normalization", str, "none"),
    "model.head_layers": ("model_head_layers", int, 1),
    "model.seed": ("model_seed", int, -1),
    "train.objective": ("train_objective", str, "acl"),
    "train.epochs": ("train_epochs", int, 60),
    "train.warmup_fraction": ("train_warmup_fraction", float, 0.1),
    "train.warmup_epochs": ("train_warmup_epochs", int, -1),
    "train.interval": ("train_interval", int, 20),
    "train.fraction": ("train_fraction", float, 0.1),
    "train.batch_size": ("train_batch_size", int, 512),
    "train.partition_shuffle": ("train_partition_shuffle", _parse_bool, True),
    "train.lr": ("train_lr", float, 0.1),
    "train.lr_schedule": ("train_lr_schedule", str, "cosine"),
    "train.momentum": ("train_momentum", float, 0.0),
    "train.temperature": ("train_temperature", float, 0.1),
    "train.omega": ("train_omega", float, 0.0),
    "train.aug_strength": ("train_aug_strength", float, 1.0),
    "attack.eps": ("attack_eps", float, 8 / 255),
    "attack.rho": ("attack_rho", float, 2 / 255),
    "attack.steps": ("attack_steps", int, 5),
    "attack.clamp": ("attack_clamp", str, ""),
    "attack.random_start": ("attack_random_start", _parse_bool, False),
    "selection.method": ("selection_method", str, "rcs"),
    "selection.lr": ("selection_lr", float, 0.01),
    "selection.steps": ("selection_steps", int, 3),
    "selection.last_layer": ("selection_last_layer", _parse_bool, False),
    "selection.chunk_size": ("selection_chunk_size", int, 0),
    "dynacl.period": ("dynacl_period", int, 50),
    "dynacl.rate": ("dynacl_rate", float, 2 / 3),
    "trades.c": ("trades_c", float, 6.0),
    "rd.distance": ("rd_distance", str, "kl"),
    "rd.temperature": ("rd_temperature", float, 1.0),
    "rd.branch": ("rd_branch", str, "adversarial"),
    "validation.fraction": ("validation_fraction", float, 0.05),
}

_OBJECTIVES = ("acl", "dynacl", "sat", "trades")
_SCHEDULES = ("constant", "cosine")
_METHODS = ("rcs", "random")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset_n: int = 512
    dataset_dim: int = 16
    dataset_classes: int = 4
    dataset_mean_scale: float = 3.0
    dataset_cov_scale: float = 1.0
    dataset_seed: int = -1
    dataset_path: str = ""
    model_hidden: tuple[int, ...] = (32,)
    model_embedding_dim: int = 16
    model_projection_dim: int = 8
    model_normalization: str = "none"
    model_head_layers: int = 1
    model_seed: int = -1
    train_objective: str = "acl"
    train_epochs: int = 60
    train_warmup_fraction: float = 0.1
    train_warmup_epochs: int = -1
    train_interval: int = 20
    train_fraction: float = 0.1
    train_batch_size: int = 512
    train_partition_shuffle: bool = True
    train_lr: float = 0.1
    train_lr_schedule: str = "cosine"
    train_momentum: float = 0.0
    train_temperature: float = 0.1
    train_omega: float = 0.0
    train_aug_strength: float = 1.0
    attack_eps: float = 8 / 255
    attack_rho: float = 2 / 255
    attack_steps: int = 5
    attack_clamp: str = ""
    attack_random_start: bool = False
    selection_method: str = "rcs"
    selection_lr: float = 0.01
    selection_steps: int = 3
    selection_last_layer: bool = False
    selection_chunk_size: int = 0
    dynacl_period: int = 50
    dynacl_rate: float = 2 / 3
    trades_c: float = 6.0
    rd_distance: str = "kl"
    rd_temperature: float = 1.0
    rd_branch: str = "adversarial"
    validation_fraction: float = 0.05

    def validate(self) -> "ExperimentConfig":
        if self.train_objective not in _OBJECTIVES:
            raise ConfigError(f"train.objective must be one of {_OBJECTIVES}")
        if self.train_lr_schedule not in _SCHEDULES:
            raise ConfigError(f"train.lr_schedule must be one of {_SCHEDULES}")
        if self.selection_method not in _METHODS:
            raise ConfigError(f"selection.method must be one of {_METHODS}")
        if self.rd_distance not in ("kl", "js"):
            raise ConfigError("rd.distance must be kl or js")
        if self.rd_branch not in ("natural", "adversarial"):
            raise ConfigError("rd.branch must be natural or adversarial")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train.fraction must lie in (0, 1]")
        if self.train_interval < 1:
            raise ConfigError("train.interval must be >= 1")
        if self.train_epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        w = self.warmup_epochs()
        if not 0 <= w <= self.train_epochs:
            raise ConfigError(f"warmup epochs {w} outside [0, {self.train_epochs}]")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation.fraction must lie in (0, 1)")
        if self.train_objective in ("sat", "trades") and (
            self.dataset_classes < 2 or self.model_projection_dim != self.dataset_classes
        ):
            raise ConfigError(
                "supervised objectives need dataset.classes >= 2 and "
                "model.projection_dim == dataset.classes"
            )
        # constructing the nested configs runs their own validation
        self.encoder_config()
        self.train_attack()
        self.selection_attack()
        return self

    # ---- derived values ---------------------------------------------------

    def resolved_dataset_seed(self) -> int:
        return self.seed if self.dataset_seed < 0 else self.dataset_seed

    def resolved_model_seed(self) -> int:
        return self.seed if self.model_seed < 0 else self.model_seed

    def warmup_epochs(self) -> int:
        if self.train_warmup_epochs >= 0:
            return self.train_warmup_epochs
        return int(self.train_warmup_fraction * self.train_epochs + 1e-9)

    def clamp_interval(self) -> tuple[float, float] | None:
        if not self.attack_clamp.strip():
            return None
        parts = self.attack_clamp.split(",")
        if len(parts) != 2:
            raise ConfigError(f"attack.clamp must be 'lo,hi', got {self.attack_clamp!r}")
        return float(parts[0]), float(parts[1])

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.dataset_dim,
            hidden=self.model_hidden,
            embedding_dim=self.model_embedding_dim,
            projection_dim=self.model_projection_dim,
            normalization=self.model_normalization,
            head_layers=self.model_head_layers,
            seed=self.resolved_model_seed(),
        )

    def train_attack(self) -> AttackConfig:
        return AttackConfig(
            steps=self.attack_steps,
            step_size=self.attack_rho,
            eps=self.attack_eps,
            clamp=self.clamp_interval(),
            random_start=self.attack_random_start,
        )

    def selection_attack(self) -> AttackConfig:
        """Reduced-step attack for selection: same budget, scaled step."""
        return AttackConfig(
            steps=self.selection_steps,
            step_size=rcs_step_size(self.attack_rho, self.attack_steps, self.selection_steps),
            eps=self.attack_eps,
            clamp=self.clamp_interval(),
        )

    def distance(self) -> DistanceKind:
        return DistanceKind(self.rd_distance, self.rd_temperature)

    def selection_config(self, omega=None, aug_strength=None) -> SelectionConfig:
        objective = "acl" if self.train_objective in ("acl", "dynacl") else self.train_objective
        return SelectionConfig(
            eta=self.selection_lr,
            fraction=self.train_fraction,
            attack=self.selection_attack(),
            distance=self.distance(),
            objective=objective,
            temperature=self.train_temperature,
            omega=self.train_omega if omega is None else omega,
            aug_strength=self.train_aug_strength if aug_strength is None else aug_strength,
            trade_off=self.trades_c,
            last_layer=self.selection_last_layer,
            rd_branch=self.rd_branch,
            seed=self.seed,
            chunk_size=self.selection_chunk_size or None,
        )


def parse_config_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def config_from_mapping(mapping: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in mapping.items():
        if key not in _SPEC:
            valid = ", ".join(sorted(_SPEC))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
        attr, parser, _ = _SPEC[key]
        try:
            setattr(cfg, attr, parser(value))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
    return cfg.validate()


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        mapping = parse_config_text(fh.read())
    if overrides:
        mapping.update({k: str(v) for k, v in overrides.items()})
    return config_from_mapping(mapping)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def resolved_text(cfg: ExperimentConfig) -> str:
    """Canonical echo of every key, one sorted line each."""
    by_attr = {attr: key for key, (attr, _, _) in _SPEC.items()}
    lines = []
    for f in fields(cfg):
        lines.append(f"{by_attr[f.name]} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(sorted(lines)) + "\n"
