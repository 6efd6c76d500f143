"""Bootstrapped probabilistic ensembles for forward and backward dynamics.

A forward ensemble models ``p(s', r | s, a)`` and a backward ensemble models
``q(s, r | s', a)``. Both predict a state delta (``s' - s`` forward,
``s - s'`` backward) and the reward as one diagonal Gaussian in normalized
target space, and both are trained by maximum likelihood on the same
buffer with the conditioning and target swapped.
"""
import enum

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from bidyn.errors import InputError, NumericalError, PreconditionError, StateError
from bidyn.func_approx import (
    DTYPE,
    GaussianPrediction,
    MlpSpec,
    ParameterStore,
    as_tensor,
    forward_eval,
    gaussian_nll,
    minimize,
    prefixed,
    soft_bound_log_var,
    unprefixed,
)


class Direction(enum.Enum):
    Forward = 0
    Backward = 1


@dataclass
class TransitionArrays:
    """Column view of transitions, rows in chronological order."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    def __len__(self) -> int:
        return len(self.s)

    def take(self, idx) -> "TransitionArrays":
        return TransitionArrays(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx])


@dataclass(frozen=True)
class EnsembleConfig:
    ensemble_size: int = 7
    n_elites: int = 5
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "swish"
    lr: float = 1e-3
    batch_size: int = 256
    holdout_ratio: float = 0.1
    patience: int = 5
    improvement_threshold: float = 0.01
    logvar_min: float = -10.0
    logvar_max: float = 0.5
    logvar_bound_weight: float = 0.01
    min_train_size: int = 100

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise InputError("an ensemble needs at least 2 members")
        if not 1 <= self.n_elites <= self.ensemble_size:
            raise InputError("n_elites must be in [1, ensemble_size]")
        if self.logvar_min > self.logvar_max:
            raise InputError("logvar_min must not exceed logvar_max")
        if not 0.0 < self.holdout_ratio < 1.0:
            raise InputError(f"holdout_ratio must be in (0, 1), got {self.holdout_ratio}")


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)

    def normalize(self, x):
        if isinstance(x, torch.Tensor):
            return (x - as_tensor(self.mean)) / as_tensor(self.std)
        return (x - self.mean) / self.std

    def denormalize(self, x):
        if isinstance(x, torch.Tensor):
            return x * as_tensor(self.std) + as_tensor(self.mean)
        return x * self.std + self.mean


@dataclass
class ModelBatchStats:
    train_loss: float
    validation_loss: np.ndarray
    epochs: int = 0


class ProbabilisticEnsemble:
    """``ensemble_size`` Gaussian networks sharing one direction.

    Parameters
    ----------
    direction: Direction
        Forward conditions on ``(s, a)`` and predicts ``s'``; Backward
        conditions on ``(s', a)`` and predicts ``s``.
    obs_dim, act_dim: int
        observation and action sizes
    config: EnsembleConfig
    generator: torch.Generator
        seeds member initialization
    """

    def __init__(
        self,
        direction: Direction,
        obs_dim: int,
        act_dim: int,
        config: EnsembleConfig = EnsembleConfig(),
        generator: Optional[torch.Generator] = None,
    ):
        self.direction = direction
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.config = config
        self.out_dim = obs_dim + 1
        self.spec = MlpSpec(
            input_dim=obs_dim + act_dim,
            output_dim=2 * self.out_dim,
            hidden_sizes=config.hidden_sizes,
            activation=config.activation,
        )
        self.members: List[ParameterStore] = []
        for _ in range(config.ensemble_size):
            store = ParameterStore.for_mlp(self.spec, generator, lr=config.lr)
            store.add("max_logvar", np.full(self.out_dim, config.logvar_max))
            store.add("min_logvar", np.full(self.out_dim, config.logvar_min))
            self.members.append(store)
        self.input_normalizer: Optional[Normalizer] = None
        self.target_normalizer: Optional[Normalizer] = None
        self.elite_indices: List[int] = []

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def trained(self) -> bool:
        return self.input_normalizer is not None and bool(self.elite_indices)

    def _require_trained(self):
        if not self.trained:
            raise StateError(f"{self.direction.name.lower()} ensemble is not trained")

    def inputs_targets(self, data: TransitionArrays) -> Tuple[np.ndarray, np.ndarray]:
        """Conditioning rows and (delta, reward) targets for this direction."""
        r = np.asarray(data.r, dtype=np.float64).reshape(-1, 1)
        if self.direction is Direction.Forward:
            x = np.concatenate([data.s, data.a], axis=-1)
            y = np.concatenate([data.s_next - data.s, r], axis=-1)
        else:
            x = np.concatenate([data.s_next, data.a], axis=-1)
            y = np.concatenate([data.s - data.s_next, r], axis=-1)
        return x, y

    def member_prediction(self, member: int, x_norm: torch.Tensor) -> GaussianPrediction:
        store = self.members[member]
        out = forward_eval(store, self.spec, x_norm)
        mean, raw = out[..., : self.out_dim], out[..., self.out_dim :]
        log_var = soft_bound_log_var(raw, store["min_logvar"], store["max_logvar"])
        return GaussianPrediction(mean=mean, log_var=log_var)

    def records(self, prefix: str) -> dict:
        self._require_trained()
        out = {
            f"{prefix}/direction": np.array(float(self.direction.value)),
            f"{prefix}/elites": np.asarray(self.elite_indices, dtype=np.float64),
            f"{prefix}/input_mean": self.input_normalizer.mean,
            f"{prefix}/input_std": self.input_normalizer.std,
            f"{prefix}/target_mean": self.target_normalizer.mean,
            f"{prefix}/target_std": self.target_normalizer.std,
        }
        for i, store in enumerate(self.members):
            out.update(prefixed(f"{prefix}/member{i}", store.arrays()))
        return out

    def load_records(self, prefix: str, records: dict):
        direction = Direction(int(records[f"{prefix}/direction"]))
        if direction is not self.direction:
            raise InputError(
                f"checkpoint holds a {direction.name} ensemble, expected {self.direction.name}"
            )
        self.elite_indices = [int(i) for i in records[f"{prefix}/elites"]]
        self.input_normalizer = Normalizer(
            records[f"{prefix}/input_mean"], records[f"{prefix}/input_std"]
        )
        self.target_normalizer = Normalizer(
            records[f"{prefix}/target_mean"], records[f"{prefix}/target_std"]
        )
        for i, store in enumerate(self.members):
            store.load_arrays(unprefixed(f"{prefix}/member{i}", records))


def _member_loss(ensemble: ProbabilisticEnsemble, member: int):
    weight = ensemble.config.logvar_bound_weight

    def loss_fn(net, batch):
        x, y = batch
        pred = ensemble.member_prediction(member, x)
        bounds = net.params["max_logvar"].sum() - net.params["min_logvar"].sum()
        return gaussian_nll(pred, y).mean() + weight * bounds

    loss_fn.__name__ = f"{ensemble.direction.name.lower()}_model_nll"
    return loss_fn


def _member_nll(
    ensemble: ProbabilisticEnsemble,
    member: int,
    x_norm: torch.Tensor,
    y_norm: torch.Tensor,
    columns: Optional[Sequence[int]] = None,
) -> float:
    with torch.no_grad():
        pred = ensemble.member_prediction(member, x_norm)
        if columns is not None:
            pred = GaussianPrediction(pred.mean[..., columns], pred.log_var[..., columns])
            y_norm = y_norm[..., columns]
        return float(gaussian_nll(pred, y_norm).mean())


def _head_columns(ensemble: ProbabilisticEnsemble, heads: Sequence[str]) -> List[int]:
    columns = []
    for head in heads:
        if head == "state":
            columns.extend(range(ensemble.obs_dim))
        elif head == "reward":
            columns.append(ensemble.obs_dim)
        else:
            raise InputError(f"unknown head {head!r}, choose 'state' or 'reward'")
    return columns


def _as_arrays(source) -> TransitionArrays:
    if isinstance(source, TransitionArrays):
        return source
    return source.arrays()


def train_ensemble(
    ensemble: ProbabilisticEnsemble,
    env_buffer,
    epochs_budget: int,
    rng: np.random.Generator,
    bootstrap: Optional[Sequence[np.ndarray]] = None,
) -> ModelBatchStats:
    """Fit every member on its own bootstrap resample of ``env_buffer``.

    The most recent ``holdout_ratio`` of the data is held out. Training stops
    when no member improved its held-out loss by ``improvement_threshold``
    (relative) for ``patience`` epochs, and each member is rolled back to
    its best epoch. Elites are the members with the lowest held-out loss.

    Parameters
    ----------
    env_buffer: ReplayBuffer or TransitionArrays
        real transitions in chronological order
    epochs_budget: int
        maximum passes over the training split
    bootstrap: list of index arrays, optional
        explicit per-member training indices instead of resampling
    """
    cfg = ensemble.config
    data = _as_arrays(env_buffer)
    n = len(data)
    if n == 0 or n < cfg.min_train_size:
        raise PreconditionError(
            f"need at least {max(cfg.min_train_size, 1)} transitions to train, have {n}"
        )
    if epochs_budget < 1:
        raise PreconditionError(f"epochs_budget must be >= 1, got {epochs_budget}")

    n_holdout = max(1, int(n * cfg.holdout_ratio))
    n_train = n - n_holdout
    if n_train < 1:
        raise PreconditionError(
            f"no training rows left after holding out {n_holdout} of {n} transitions"
        )

    x, y = ensemble.inputs_targets(data)
    ensemble.input_normalizer = Normalizer.fit(x)
    ensemble.target_normalizer = Normalizer.fit(y)
    x_n = torch.as_tensor(ensemble.input_normalizer.normalize(x), dtype=DTYPE)
    y_n = torch.as_tensor(ensemble.target_normalizer.normalize(y), dtype=DTYPE)
    x_hold, y_hold = x_n[n_train:], y_n[n_train:]

    if bootstrap is None:
        bootstrap = [rng.integers(0, n_train, n_train) for _ in range(ensemble.size)]
    elif len(bootstrap) != ensemble.size:
        raise InputError("bootstrap needs one index array per member")

    best = [float("inf")] * ensemble.size
    snapshots = [store.arrays() for store in ensemble.members]
    since_improved = 0
    train_loss = float("nan")
    epoch = 0

    for epoch in range(1, epochs_budget + 1):
        epoch_losses = []
        for i, store in enumerate(ensemble.members):
            idx = rng.permutation(np.asarray(bootstrap[i]))
            loss_fn = _member_loss(ensemble, i)
            for start in range(0, len(idx), cfg.batch_size):
                rows = idx[start : start + cfg.batch_size]
                try:
                    loss = minimize(store, ensemble.spec, loss_fn, (x_n[rows], y_n[rows]))
                except NumericalError as e:
                    raise NumericalError(
                        f"{ensemble.direction.name.lower()} model diverged",
                        f"member {i}: {e}",
                    ) from e
                epoch_losses.append(loss)
        train_loss = float(np.mean(epoch_losses))

        improved = False
        for i in range(ensemble.size):
            current = _member_nll(ensemble, i, x_hold, y_hold)
            if best[i] == float("inf") or best[i] - current > cfg.improvement_threshold * abs(best[i]):
                best[i] = current
                snapshots[i] = ensemble.members[i].arrays()
                improved = True
        since_improved = 0 if improved else since_improved + 1
        if since_improved >= cfg.patience:
            break

    for store, snap in zip(ensemble.members, snapshots):
        store.load_arrays(snap)

    holdout = np.array(
        [_member_nll(ensemble, i, x_hold, y_hold) for i in range(ensemble.size)]
    )
    if not np.all(np.isfinite(holdout)):
        raise NumericalError("non-finite validation loss", f"losses {holdout}")
    ensemble.elite_indices = sorted(
        int(i) for i in np.argsort(holdout, kind="stable")[: cfg.n_elites]
    )
    return ModelBatchStats(train_loss=train_loss, validation_loss=holdout, epochs=epoch)


def validation_loss(
    ensemble: ProbabilisticEnsemble,
    holdout,
    heads: Sequence[str] = ("state", "reward"),
) -> np.ndarray:
    """Per-member mean Gaussian NLL on ``holdout`` in normalized target space.

    ``heads`` restricts the sum to the state columns, the reward column or
    both; the two single-head losses add up to the joint one.
    """
    ensemble._require_trained()
    data = _as_arrays(holdout)
    if len(data) == 0:
        raise PreconditionError("validation needs a nonempty holdout set")
    x, y = ensemble.inputs_targets(data)
    x_n = torch.as_tensor(ensemble.input_normalizer.normalize(x), dtype=DTYPE)
    y_n = torch.as_tensor(ensemble.target_normalizer.normalize(y), dtype=DTYPE)
    columns = _head_columns(ensemble, heads)
    return np.array(
        [_member_nll(ensemble, i, x_n, y_n, columns) for i in range(ensemble.size)]
    )


def _conditioning(ensemble: ProbabilisticEnsemble, state, action) -> torch.Tensor:
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape[-1] != ensemble.obs_dim or action.shape[-1] != ensemble.act_dim:
        raise InputError(
            f"conditioning dims {state.shape[-1]}/{action.shape[-1]} do not match "
            f"ensemble {ensemble.obs_dim}/{ensemble.act_dim}"
        )
    x = np.concatenate([state, action], axis=-1)
    return torch.as_tensor(ensemble.input_normalizer.normalize(x), dtype=DTYPE)


def _resolve_members(
    ensemble: ProbabilisticEnsemble,
    member: Union[None, int, np.ndarray],
    n_rows: int,
    rng: Optional[np.random.Generator],
) -> np.ndarray:
    if member is None:
        if rng is None:
            raise InputError("an rng is needed to pick random elites")
        return rng.choice(np.asarray(ensemble.elite_indices), size=n_rows)
    members = np.broadcast_to(np.asarray(member, dtype=np.int64), (n_rows,))
    if np.any(members < 0) or np.any(members >= ensemble.size):
        raise InputError(f"member index out of range [0, {ensemble.size})")
    return members


def predict(
    ensemble: ProbabilisticEnsemble,
    conditioning: Tuple[np.ndarray, np.ndarray],
    member: Union[None, int, np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    deterministic: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample the adjacent state and the reward.

    ``conditioning`` is ``(s, a)`` for a forward ensemble and ``(s', a)`` for
    a backward one; rows may be batched along the leading axis. Without a
    ``member`` each row uses a uniformly drawn elite. ``deterministic``
    returns the member mean instead of a sample.

    Returns
    -------
    (state, reward): the predicted next (forward) or previous (backward)
    state, shape ``(..., obs_dim)``, and reward, shape ``(...)``
    """
    ensemble._require_trained()
    state, action = conditioning
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    single = state.ndim == 1
    state2 = np.atleast_2d(state)
    action2 = np.atleast_2d(action)
    x_n = _conditioning(ensemble, state2, action2)
    n_rows = x_n.shape[0]

    members = _resolve_members(ensemble, member, n_rows, rng)
    sample = np.empty((n_rows, ensemble.out_dim))
    with torch.no_grad():
        for m in np.unique(members):
            rows = np.nonzero(members == m)[0]
            pred = ensemble.member_prediction(int(m), x_n[rows])
            mean = pred.mean.numpy()
            if deterministic:
                sample[rows] = mean
            else:
                std = np.exp(0.5 * pred.log_var.numpy())
                if rng is None:
                    raise InputError("an rng is needed to sample predictions")
                sample[rows] = mean + std * rng.standard_normal(mean.shape)

    target = ensemble.target_normalizer.denormalize(sample)
    adjacent = state2 + target[:, : ensemble.obs_dim]
    reward = target[:, ensemble.obs_dim]
    if single:
        return adjacent[0], reward[0]
    return adjacent, reward


def ensemble_mean_predict(
    ensemble: ProbabilisticEnsemble, state: np.ndarray, action: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Average of the elite means, no sampling."""
    ensemble._require_trained()
    outs = [
        predict(ensemble, (state, action), member=m, deterministic=True)
        for m in ensemble.elite_indices
    ]
    adjacent = np.mean([o[0] for o in outs], axis=0)
    reward = np.mean([o[1] for o in outs], axis=0)
    return adjacent, reward
