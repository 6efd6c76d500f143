"""Function approximation substrate shared by every learned component.

Networks are plain multilayer perceptrons described by an :class:`MlpSpec`
and evaluated functionally from a :class:`ParameterStore`, so a loss can be
written once and differentiated with respect to any store. Gradients come
from torch's reverse mode, updates from ``torch.optim.Adam``. All tensors
are float64; the gradient checks compare against central differences at
``h=1e-5`` which needs the extra precision.

This module also owns the checkpoint codec (see ``docs/source/dev_guide.md``
for the byte layout).
"""
import struct

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from bidyn.errors import CheckpointError, InputError, NumericalError

DTYPE = torch.float64

ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "swish": F.silu,
    "identity": lambda x: x,
}

Array = Union[np.ndarray, torch.Tensor, Sequence[float]]


def as_tensor(x: Array) -> torch.Tensor:
    """Convert array-likes to float64 tensors without copying tensors."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "swish"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.input_dim < 1 or self.output_dim < 1:
            raise InputError(
                f"mlp dims must be >= 1, got {self.input_dim}->{self.output_dim}"
            )
        if len(self.hidden_sizes) < 1 or min(self.hidden_sizes) < 1:
            raise InputError(
                f"mlp needs at least one hidden layer of size >= 1, got {self.hidden_sizes}"
            )
        if self.activation not in ACTIVATIONS:
            raise InputError(
                f"unknown activation {self.activation!r}, choose from {sorted(ACTIVATIONS)}"
            )

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden_sizes, self.output_dim)

    def shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        sizes = self.layer_sizes
        shapes = OrderedDict()
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"layer{i}.weight"] = (n_out, n_in)
            shapes[f"layer{i}.bias"] = (n_out,)
        return shapes


class ParameterStore:
    """Named float64 leaf tensors plus the Adam moment buffers for them.

    The optimizer is created on the first :func:`adam_step` so extra tensors
    (e.g. log-variance bounds) can be added after the network weights.
    """

    def __init__(self, tensors: Mapping[str, Array], lr: float = 1e-3):
        self._tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.lr = lr
        self._optimizer: Optional[torch.optim.Adam] = None
        for name, value in tensors.items():
            self.add(name, value)

    @classmethod
    def for_mlp(
        cls,
        spec: MlpSpec,
        generator: Optional[torch.Generator] = None,
        lr: float = 1e-3,
        zero: bool = False,
    ) -> "ParameterStore":
        """Initialize like ``nn.Linear``: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        tensors = OrderedDict()
        for name, shape in spec.shapes().items():
            t = torch.zeros(shape, dtype=DTYPE)
            if not zero:
                fan_in = shape[1] if len(shape) == 2 else tensors[
                    name.replace("bias", "weight")
                ].shape[1]
                bound = 1.0 / np.sqrt(fan_in)
                t.uniform_(-bound, bound, generator=generator)
            tensors[name] = t
        return cls(tensors, lr=lr)

    def add(self, name: str, value: Array):
        if self._optimizer is not None:
            raise InputError("cannot add parameters after the optimizer started")
        t = as_tensor(value).detach().clone().requires_grad_(True)
        self._tensors[name] = t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> Iterable[str]:
        return self._tensors.keys()

    def tensors(self) -> Iterable[torch.Tensor]:
        return self._tensors.values()

    def items(self):
        return self._tensors.items()

    @property
    def optimizer(self) -> torch.optim.Adam:
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(list(self.tensors()), lr=self.lr)
        return self._optimizer

    @property
    def step_count(self) -> int:
        if self._optimizer is None:
            return 0
        first = next(iter(self.tensors()))
        state = self._optimizer.state.get(first, {})
        return int(state["step"]) if "step" in state else 0

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, t.detach().numpy().copy()) for name, t in self.items()
        )

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        for name, t in self.items():
            if name not in arrays:
                raise CheckpointError(f"missing parameter {name!r}")
            value = as_tensor(arrays[name])
            if tuple(value.shape) != tuple(t.shape):
                raise CheckpointError(
                    f"parameter {name!r} has shape {tuple(value.shape)}, expected {tuple(t.shape)}"
                )
            with torch.no_grad():
                t.copy_(value)

    def copy_from(self, other: "ParameterStore"):
        with torch.no_grad():
            for (_, mine), (_, theirs) in zip(self.items(), other.items()):
                mine.copy_(theirs)

    def clone(self) -> "ParameterStore":
        return ParameterStore(
            OrderedDict((n, t.detach().clone()) for n, t in self.items()),
            lr=self.lr,
        )

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors())


class Network:
    """Callable view of a store evaluated with a spec, handed to loss functions."""

    def __init__(self, params: ParameterStore, spec: Optional[MlpSpec]):
        self.params = params
        self.spec = spec

    def __call__(self, x: Array) -> torch.Tensor:
        if self.spec is None:
            raise InputError("this parameter store has no network spec")
        return forward_eval(self.params, self.spec, x)


LossFn = Callable[[Network, object], torch.Tensor]


def forward_eval(params: ParameterStore, spec: MlpSpec, x: Array) -> torch.Tensor:
    """Evaluate the perceptron on ``x`` (shape ``(..., input_dim)``).

    The result stays attached to the autograd graph so it can take part in
    a loss; wrap calls in ``torch.no_grad()`` for pure evaluation.
    """
    x = as_tensor(x)
    if x.shape[-1] != spec.input_dim:
        raise InputError(
            f"input has trailing dimension {x.shape[-1]}, expected {spec.input_dim}"
        )
    if not bool(torch.isfinite(x).all()):
        raise InputError("network input contains non-finite values")

    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_sizes) - 1
    h = x
    for i in range(n_layers):
        h = F.linear(h, params[f"layer{i}.weight"], params[f"layer{i}.bias"])
        if i < n_layers - 1:
            h = act(h)
    return h


def gradient(
    params: ParameterStore,
    spec: Optional[MlpSpec],
    loss_fn: LossFn,
    batch,
) -> Tuple[float, "OrderedDict[str, torch.Tensor]"]:
    """Return ``(loss, d loss / d p)`` for every tensor ``p`` in ``params``.

    Tensors the loss does not touch get zero gradients.
    """
    loss = loss_fn(Network(params, spec), batch)
    if loss.dim() != 0:
        raise InputError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NumericalError(
            "non-finite loss", getattr(loss_fn, "__name__", repr(loss_fn))
        )

    names = list(params.names())
    if not loss.requires_grad:
        grads = [None] * len(names)
    else:
        grads = torch.autograd.grad(loss, list(params.tensors()), allow_unused=True)
    out = OrderedDict()
    for name, g, t in zip(names, grads, params.tensors()):
        out[name] = torch.zeros_like(t) if g is None else g.detach()
    return float(loss.detach()), out


def adam_step(
    params: ParameterStore,
    grads: Mapping[str, torch.Tensor],
    lr: float,
    step_count: Optional[int] = None,
) -> ParameterStore:
    """Apply one bias-corrected Adam update in place and return the store.

    ``step_count`` is the 1-based number this update is expected to have;
    when given it is checked against the optimizer state.
    """
    if step_count is not None and step_count != params.step_count + 1:
        raise InputError(
            f"adam step {step_count} requested, store is at step {params.step_count}"
        )
    for name, t in params.items():
        g = grads[name]
        if tuple(g.shape) != tuple(t.shape):
            raise InputError(
                f"gradient for {name!r} has shape {tuple(g.shape)}, expected {tuple(t.shape)}"
            )
        if not bool(torch.isfinite(g).all()):
            raise NumericalError("non-finite gradient", name)
        t.grad = g.detach().clone()

    optimizer = params.optimizer
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)

    if not params.all_finite():
        raise NumericalError("parameters became non-finite after adam step")
    return params


def minimize(
    params: ParameterStore,
    spec: Optional[MlpSpec],
    loss_fn: LossFn,
    batch,
    lr: Optional[float] = None,
) -> float:
    """One gradient step on ``loss_fn``; returns the pre-step loss."""
    loss, grads = gradient(params, spec, loss_fn, batch)
    adam_step(params, grads, params.lr if lr is None else lr)
    return loss


def check_gradient(
    params: ParameterStore,
    spec: Optional[MlpSpec],
    loss_fn: LossFn,
    batch,
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients with central differences.

    Returns the largest absolute discrepancy divided by the largest gradient
    magnitude, so near-zero entries do not blow the ratio up.
    """
    _, analytic = gradient(params, spec, loss_fn, batch)
    net = Network(params, spec)

    worst = 0.0
    scale = 1e-8
    with torch.no_grad():
        for name, t in params.items():
            flat = t.view(-1)
            a = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn(net, batch))
                flat[i] = orig - h
                down = float(loss_fn(net, batch))
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                worst = max(worst, abs(numeric - float(a[i])))
                scale = max(scale, abs(numeric), abs(float(a[i])))
    return worst / scale


###########################################################################
#                                                                         #
#                         gaussian output heads                           #
#                                                                         #
###########################################################################


@dataclass
class GaussianPrediction:
    mean: torch.Tensor
    log_var: torch.Tensor


def soft_bound_log_var(
    raw: torch.Tensor, logvar_min: torch.Tensor, logvar_max: torch.Tensor
) -> torch.Tensor:
    """Smoothly saturate ``raw`` into ``[logvar_min, logvar_max]``."""
    log_var = logvar_max - F.softplus(logvar_max - raw)
    return logvar_min + F.softplus(log_var - logvar_min)


def gaussian_nll(pred: GaussianPrediction, target: Array) -> torch.Tensor:
    """Per-sample ``(mu - y)^T Sigma^-1 (mu - y) + log det Sigma``.

    No 1/2 factor and no 2*pi constant, so a perfect unit-variance
    prediction scores exactly zero.
    """
    target = as_tensor(target)
    if pred.mean.shape != target.shape or pred.log_var.shape != target.shape:
        raise InputError(
            f"prediction shape {tuple(pred.mean.shape)} does not match target {tuple(target.shape)}"
        )
    diff = pred.mean - target
    return (diff.pow(2) * torch.exp(-pred.log_var)).sum(-1) + pred.log_var.sum(-1)


###########################################################################
#                                                                         #
#                           checkpoint codec                              #
#                                                                         #
###########################################################################

CHECKPOINT_MAGIC = b"BIDYNCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[Path, str], records: Mapping[str, Array]):
    """Write ``records`` as little-endian float64 arrays."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name, value in records.items():
        arr = np.asarray(
            value.detach().numpy() if isinstance(value, torch.Tensor) else value,
            dtype="<f8",
        )
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    try:
        with path.open("wb") as f:
            f.write(b"".join(chunks))
    except OSError as e:
        raise CheckpointError(f"unable to write checkpoint {path}: {e}") from e


def load_checkpoint(path: Union[Path, str]) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"unable to read checkpoint {path}: {e}") from e

    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a bidyn checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    records = OrderedDict()
    offset = 16
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + n].decode("utf-8")
            offset += n
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            records[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated checkpoint {path}: {e}") from e
    return records


def prefixed(prefix: str, records: Mapping[str, Array]) -> "OrderedDict[str, Array]":
    return OrderedDict((f"{prefix}/{name}", value) for name, value in records.items())


def unprefixed(prefix: str, records: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    start = len(prefix) + 1
    return {
        name[start:]: value
        for name, value in records.items()
        if name.startswith(prefix + "/")
    }
