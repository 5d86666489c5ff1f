"""Dense float64 arithmetic and a hand-written reverse-mode core for small MLPs.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Networks keep
their parameters and gradient buffers in name-keyed dictionaries so that the
optimizer, the checkpoint writer and the target-network code can all treat
them uniformly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CheckpointError, DimensionError, StateError, TrainingDivergenceError

Tensor = np.ndarray

ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_MAGIC = b"NDRL"
CHECKPOINT_VERSION = 1


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


class ParamSet:
    """Named float64 tensors plus same-shaped gradient accumulators."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = {k: as_tensor(v).copy() for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def state_dict(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, tensors: dict[str, Tensor], prefix: str = "") -> None:
        for k, v in self.params.items():
            key = prefix + k
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key!r}")
            src = as_tensor(tensors[key])
            if src.shape != v.shape:
                raise CheckpointError(f"shape mismatch for {key!r}: expected {v.shape}, got {src.shape}")
            v[...] = src

    def copy_from(self, other: "ParamSet") -> None:
        self.load_state_dict(other.params)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def clone(self) -> "ParamSet":
        return ParamSet(self.params)


@dataclass
class ForwardCache:
    """Per-layer activations recorded by :meth:`Mlp.forward_train`."""

    owner: int
    squeeze: bool
    inputs: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Mlp(ParamSet):
    """Fully connected network ``y = act(W x + b)`` stacked per layer.

    ``weights[i]`` has shape ``(layer_sizes[i+1], layer_sizes[i])``. Inputs may
    be a single vector or a ``(batch, in)`` matrix.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        rng: np.random.Generator | None = None,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise DimensionError(f"layer sizes must be >= 2 positive ints, got {sizes}")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = [hidden_activation] * (n_layers - 1) + [output_activation]
        activations = [a.lower() for a in activations]
        if len(activations) != n_layers:
            raise DimensionError(f"need {n_layers} activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; expected one of {ACTIVATIONS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        params = {}
        for i in range(n_layers):
            params[f"w{i}"] = xavier_uniform(sizes[i], sizes[i + 1], rng)
            params[f"b{i}"] = np.zeros(sizes[i + 1])
        super().__init__(params)
        self.layer_sizes = tuple(sizes)
        self.activations = tuple(activations)

    @classmethod
    def from_weights(cls, weights: Sequence, biases: Sequence, activations: Sequence[str]) -> "Mlp":
        weights = [np.atleast_2d(as_tensor(w)) for w in weights]
        sizes = [weights[0].shape[1]] + [w.shape[0] for w in weights]
        net = cls(sizes, activations)
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != net.params[f"w{i}"].shape:
                raise DimensionError(f"layer {i}: weight shape {w.shape} does not compose")
            net.params[f"w{i}"][...] = w
            net.params[f"b{i}"][...] = as_tensor(b).reshape(-1)
        return net

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def clone(self) -> "Mlp":
        other = Mlp(self.layer_sizes, self.activations)
        other.copy_from(self)
        return other

    def _check_input(self, x) -> tuple[Tensor, bool]:
        x = as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"input width: expected {self.in_dim}, got {x.shape[-1] if x.ndim else 'scalar'}")
        return x, squeeze

    def forward(self, x) -> Tensor:
        h, squeeze = self._check_input(x)
        for i, act in enumerate(self.activations):
            h = h @ self.params[f"w{i}"].T + self.params[f"b{i}"]
            if act == "relu":
                h = np.maximum(h, 0.0)
            elif act == "tanh":
                h = np.tanh(h)
        return h[0] if squeeze else h

    __call__ = forward

    def forward_train(self, x) -> tuple[Tensor, ForwardCache]:
        h, squeeze = self._check_input(x)
        cache = ForwardCache(owner=id(self), squeeze=squeeze)
        for i, act in enumerate(self.activations):
            cache.inputs.append(h)
            h = h @ self.params[f"w{i}"].T + self.params[f"b{i}"]
            if act == "relu":
                h = np.maximum(h, 0.0)
            elif act == "tanh":
                h = np.tanh(h)
            cache.outputs.append(h)
        return (h[0] if squeeze else h), cache

    def backward(self, cache: ForwardCache | None, grad_out, accumulate: bool = True) -> Tensor:
        """Backpropagate ``grad_out`` through the cached pass.

        Parameter gradients are added into ``self.grads`` unless
        ``accumulate`` is false; the gradient w.r.t. the input is returned
        either way.
        """
        if cache is None or not isinstance(cache, ForwardCache):
            raise StateError("backward needs the cache returned by forward_train")
        if cache.owner != id(self):
            raise StateError("activation cache belongs to a different network")
        g = as_tensor(grad_out)
        if cache.squeeze:
            g = g.reshape(1, -1)
        if g.shape != cache.outputs[-1].shape:
            raise DimensionError(f"grad shape {g.shape} does not match output {cache.outputs[-1].shape}")
        for i in reversed(range(self.n_layers)):
            act = self.activations[i]
            out = cache.outputs[i]
            if act == "relu":
                g = g * (out > 0.0)
            elif act == "tanh":
                g = g * (1.0 - out * out)
            if accumulate:
                self.grads[f"w{i}"] += g.T @ cache.inputs[i]
                self.grads[f"b{i}"] += g.sum(axis=0)
            g = g @ self.params[f"w{i}"]
        return g[0] if cache.squeeze else g


def mse_loss(pred, target) -> tuple[float, Tensor]:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def log_softmax(logits, axis: int = -1) -> Tensor:
    z = as_tensor(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> Tensor:
    z = as_tensor(logits)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy_loss(logits, label) -> tuple[float, Tensor]:
    """Mean negative log-softmax at ``label``; accepts one row or a batch."""
    z = as_tensor(logits)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != z2.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {z2.shape[0]} rows")
    n = z2.shape[1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range for {n} classes: {labels}")
    labels = labels.astype(np.int64)
    lsm = log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = float(-np.mean(lsm[rows, labels]))
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    grad /= z2.shape[0]
    return loss, (grad[0] if single else grad)


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, Tensor] = field(default_factory=dict)
    second_moment: dict[str, Tensor] = field(default_factory=dict)


def global_grad_norm(grads: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    max_grad_norm: float | None = None,
) -> float:
    """One bias-corrected Adam update in place; zeroes ``grads`` afterwards.

    Returns the pre-clipping global gradient norm.
    """
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient {name!r} has no parameter")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient {name!r} shape {g.shape} != parameter {params[name].shape}")
    norm = global_grad_norm(grads.values())
    if not math.isfinite(norm):
        # a finite norm implies finite entries; only scan tensors to name the culprit
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(name)
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm:
        scale = max_grad_norm / (norm + 1e-12)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        if scale != 1.0:
            g = g * scale
        m = state.first_moment.setdefault(name, np.zeros_like(g))
        v = state.second_moment.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for g in grads.values():
        g.fill(0.0)
    return norm


class Adam:
    """Adam over one or more :class:`ParamSet` objects, keyed by prefix."""

    def __init__(
        self,
        groups: dict[str, ParamSet] | Sequence[ParamSet] | ParamSet,
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float | None = 10.0,
    ):
        if isinstance(groups, ParamSet):
            groups = {"": groups}
        elif not isinstance(groups, dict):
            groups = {f"{i}.": g for i, g in enumerate(groups)}
        self.groups = dict(groups)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.max_grad_norm = max_grad_norm
        self._params: dict[str, Tensor] = {}
        self._grads: dict[str, Tensor] = {}
        for prefix, ps in self.groups.items():
            for k in ps.params:
                self._params[prefix + k] = ps.params[k]
                self._grads[prefix + k] = ps.grads[k]

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = float(value)

    def step(self) -> float:
        return adam_step(self._params, self._grads, self.state, self.max_grad_norm)

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def state_dict(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "step_count": np.array(float(self.state.step_count))}
        for k, v in self.state.first_moment.items():
            out[f"{prefix}m.{k}"] = v.copy()
        for k, v in self.state.second_moment.items():
            out[f"{prefix}v.{k}"] = v.copy()
        return out

    def load_state_dict(self, tensors: dict[str, Tensor], prefix: str = "") -> None:
        self.state.step_count = int(tensors[prefix + "step_count"])
        for k in self._params:
            if f"{prefix}m.{k}" in tensors:
                self.state.first_moment[k] = as_tensor(tensors[f"{prefix}m.{k}"]).copy()
                self.state.second_moment[k] = as_tensor(tensors[f"{prefix}v.{k}"]).copy()


def encode_checkpoint(tensors: dict[str, Tensor]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in tensors.items():
        arr = as_tensor(value)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} too large for {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, Tensor]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not an NDRL checkpoint")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, Tensor] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointError(f"payload of {name!r} is truncated")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save_checkpoint(path, tensors: dict[str, Tensor]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, Tensor]:
    return decode_checkpoint(Path(path).read_bytes())
