"""Training configuration and its flat YAML form.

Every nested dataclass field maps to one top-level key. Rollout schedules
expand into ``<name>_x``, ``<name>_y``, ``<name>_a`` and ``<name>_b``;
MPC, model and SAC fields carry the ``mpc_``, ``model_`` and ``sac_``
prefixes. ``BIDYN_SEED`` overrides the seed of a loaded file.
"""
import enum
import os

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from bidyn.dynamics import EnsembleConfig
from bidyn.errors import ConfigError, InputError
from bidyn.mpc import MpcConfig
from bidyn.policy import BackwardPolicyLoss, SacConfig
from bidyn.rollout import Ablation, RolloutConfig, Schedule

SEED_ENV_VAR = "BIDYN_SEED"

SECTION_PREFIXES = {
    "rollout": "",
    "mpc": "mpc_",
    "model": "model_",
    "sac": "sac_",
}


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_epochs: int = 20
    env_steps_per_epoch: int = 200
    exploration_epochs: int = 1
    policy_grad_steps: int = 10
    backward_policy_steps: int = 1
    eval_episodes: int = 10
    env_buffer_capacity: int = 100_000
    model_buffer_capacity: int = 40_000
    model_train_epochs: int = 50
    real_ratio: float = 0.0
    backward_window_epochs: int = 5
    backward_policy_batch_size: int = 256
    backward_policy_lr: float = 1e-3
    gan_non_saturating: bool = False
    ablation: Ablation = Ablation.Full
    backward_policy_loss: BackwardPolicyLoss = BackwardPolicyLoss.Mle
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    model: EnsembleConfig = field(default_factory=EnsembleConfig)
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        counts = (
            "n_epochs",
            "env_steps_per_epoch",
            "exploration_epochs",
            "policy_grad_steps",
            "backward_policy_steps",
            "backward_window_epochs",
        )
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.model_train_epochs < 1:
            raise ConfigError(f"model_train_epochs must be >= 1, got {self.model_train_epochs}")
        if self.n_epochs > 0 and self.env_steps_per_epoch < 1:
            raise ConfigError("env_steps_per_epoch must be >= 1 when n_epochs > 0")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.env_buffer_capacity < 1 or self.model_buffer_capacity < 1:
            raise ConfigError("buffer capacities must be >= 1")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigError(f"real_ratio must be in [0, 1], got {self.real_ratio}")

    @property
    def total_env_steps(self) -> int:
        return self.n_epochs * self.env_steps_per_epoch

    @property
    def mpc_active(self) -> bool:
        return self.ablation.uses_mpc and self.mpc.active


###########################################################################
#                                                                         #
#                             flat key mapping                            #
#                                                                         #
###########################################################################


def _coerce(key: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, enum.Enum):
        try:
            return type(default)(value)
        except ValueError:
            choices = ", ".join(m.value for m in type(default))
            raise ConfigError(f"{key} must be one of {choices}, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{key} has an unsupported type")


def _plain(value: Any):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return list(value)
    return value


def to_flat(config: TrainConfig) -> Dict[str, Any]:
    """Flat key mapping of ``config`` in field order."""
    flat: Dict[str, Any] = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in SECTION_PREFIXES:
            prefix = SECTION_PREFIXES[f.name]
            for sub in fields(value):
                sub_value = getattr(value, sub.name)
                if isinstance(sub_value, Schedule):
                    for part in ("x", "y", "a", "b"):
                        flat[f"{sub.name}_{part}"] = getattr(sub_value, part)
                else:
                    flat[f"{prefix}{sub.name}"] = _plain(sub_value)
        else:
            flat[f.name] = _plain(value)
    return flat


def from_flat(flat: Dict[str, Any], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Build a config from flat keys; missing keys keep ``base`` values."""
    base = TrainConfig() if base is None else base
    remaining = dict(flat)
    top: Dict[str, Any] = {}

    for f in fields(base):
        default = getattr(base, f.name)
        if f.name in SECTION_PREFIXES:
            prefix = SECTION_PREFIXES[f.name]
            section: Dict[str, Any] = {}
            for sub in fields(default):
                sub_default = getattr(default, sub.name)
                if isinstance(sub_default, Schedule):
                    parts = {}
                    for part, kind in (("x", 0.0), ("y", 0.0), ("a", 0), ("b", 0)):
                        key = f"{sub.name}_{part}"
                        if key in remaining:
                            parts[part] = _coerce(key, remaining.pop(key), kind)
                    if parts:
                        try:
                            section[sub.name] = replace(sub_default, **parts)
                        except InputError as e:
                            raise ConfigError(f"{sub.name}_*: {e}") from e
                else:
                    key = f"{prefix}{sub.name}"
                    if key in remaining:
                        section[sub.name] = _coerce(key, remaining.pop(key), sub_default)
            if section:
                try:
                    top[f.name] = replace(default, **section)
                except InputError as e:
                    keys = ", ".join(f"{prefix}{k}" for k in section)
                    raise ConfigError(f"invalid {f.name} settings ({keys}): {e}") from e
        elif f.name in remaining:
            top[f.name] = _coerce(f.name, remaining.pop(f.name), default)

    if remaining:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(remaining))}")
    return replace(base, **top)


def load_config(
    path: Union[Path, str, None] = None, seed: Optional[int] = None
) -> TrainConfig:
    """Read a flat YAML config; ``BIDYN_SEED`` then ``seed`` override its seed."""
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            with path.open() as f:
                loaded = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"unable to read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping of config keys")
        flat = loaded

    config = from_flat(flat)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config = replace(config, seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def dump_config(config: TrainConfig, path: Union[Path, str]):
    path = Path(path)
    try:
        with path.open("w") as f:
            yaml.safe_dump(to_flat(config), f, sort_keys=False)
    except OSError as e:
        raise ConfigError(f"unable to write config {path}: {e}") from e


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Apply flat-key overrides on top of an existing config."""
    return from_flat({k: _plain(v) for k, v in overrides.items()}, base=config)

