"""Minimal differentiable-network substrate.

Flat parameter vectors with an explicit layout, MLP forward/backward,
softmax cross-entropy, SGD with momentum and weight decay, a cosine
learning-rate schedule, and a finite-difference gradient checker.  All
arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Activation = str  # "identity" | "relu"
ACTIVATIONS = ("identity", "relu")


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass
class ParamVector:
    """A flat float64 parameter vector plus the layout mapping it to tensors.

    Layout offsets are contiguous and non-overlapping; ``tensor(name)``
    returns a reshaped view, so in-place edits of a view are visible in
    ``values`` and vice versa.
    """

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = 0
        index = {}
        for entry in self.layout:
            if entry.offset != expected:
                raise ShapeError(
                    f"layout entry {entry.name!r} at offset {entry.offset}, expected {expected}"
                )
            index[entry.name] = entry
            expected += entry.size
        if expected != self.values.size:
            raise ShapeError(
                f"layout covers {expected} values, vector has {self.values.size}"
            )
        self._index = index

    @property
    def size(self) -> int:
        return self.values.size

    def tensor(self, name: str) -> np.ndarray:
        entry = self._index[name]
        return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)

    def tensors(self) -> dict[str, np.ndarray]:
        return {e.name: self.values[e.offset : e.offset + e.size].reshape(e.shape) for e in self.layout}

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def tobytes(self) -> bytes:
        return self.values.tobytes()


def flatten(named: Sequence[tuple[str, np.ndarray]]) -> ParamVector:
    """Pack (name, tensor) pairs into a ParamVector, preserving order."""
    layout = []
    chunks = []
    offset = 0
    for name, arr in named:
        arr = np.asarray(arr, dtype=np.float64)
        layout.append(LayoutEntry(name, arr.shape, offset))
        chunks.append(arr.ravel())
        offset += arr.size
    values = np.concatenate(chunks) if chunks else np.empty(0)
    return ParamVector(values, tuple(layout))


def unflatten(pv: ParamVector) -> dict[str, np.ndarray]:
    """Inverse of flatten: copies of the layout tensors, layout order."""
    return {e.name: pv.tensor(e.name).copy() for e in pv.layout}


@dataclass(frozen=True)
class MlpSpec:
    """Widths of a fully connected net; widths[0] is the input width.

    ``bias`` has one flag per weight layer (len(widths) - 1).  The
    activation is applied between layers, never after the last.
    """

    widths: tuple[int, ...]
    activation: Activation = "identity"
    bias: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs an input and an output width")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.bias:
            object.__setattr__(self, "bias", (True,) * self.n_layers)
        elif len(self.bias) != self.n_layers:
            raise ValueError("one bias flag per layer required")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def layout(self) -> tuple[LayoutEntry, ...]:
        cached = getattr(self, "_layout", None)
        if cached is None:
            entries = []
            offset = 0
            for i in range(self.n_layers):
                shape = (self.widths[i], self.widths[i + 1])
                entries.append(LayoutEntry(f"layer{i}.weight", shape, offset))
                offset += shape[0] * shape[1]
                if self.bias[i]:
                    entries.append(LayoutEntry(f"layer{i}.bias", (self.widths[i + 1],), offset))
                    offset += self.widths[i + 1]
            cached = tuple(entries)
            object.__setattr__(self, "_layout", cached)
        return cached

    @property
    def n_params(self) -> int:
        layout = self.layout()
        return layout[-1].offset + layout[-1].size if layout else 0


def zeros_params(spec: MlpSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.n_params), spec.layout())


def init_params(spec: MlpSpec, rng: np.random.Generator, weight_scale: float | None = None) -> ParamVector:
    """Gaussian weights with 1/sqrt(fan_in) scale (or a fixed scale), zero biases."""
    pv = zeros_params(spec)
    for i in range(spec.n_layers):
        w = pv.tensor(f"layer{i}.weight")
        scale = weight_scale if weight_scale is not None else 1.0 / math.sqrt(spec.widths[i])
        w[...] = rng.normal(0.0, scale, size=w.shape)
    return pv


def _check_batch(spec: MlpSpec, batch: np.ndarray, layer: str = "layer0") -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != spec.in_width:
        raise ShapeError(
            f"{layer}: batch of shape {batch.shape} does not match input width {spec.in_width}"
        )
    return batch


def forward(params: ParamVector, spec: MlpSpec, batch: np.ndarray) -> np.ndarray:
    """Run the MLP; one logit row per input row."""
    out, _ = forward_cached(params, spec, batch)
    return out


def forward_cached(params: ParamVector, spec: MlpSpec, batch: np.ndarray):
    """Forward pass that also keeps per-layer inputs and pre-activations."""
    x = _check_batch(spec, batch)
    if params.size != spec.n_params:
        raise ShapeError(f"params length {params.size} != spec expects {spec.n_params}")
    inputs = []
    pres = []
    for i in range(spec.n_layers):
        inputs.append(x)
        x = x @ params.tensor(f"layer{i}.weight")
        if spec.bias[i]:
            x = x + params.tensor(f"layer{i}.bias")
        pres.append(x)
        if spec.activation == "relu" and i < spec.n_layers - 1:
            x = np.maximum(x, 0.0)
    return x, (inputs, pres)


def backward(params: ParamVector, spec: MlpSpec, cache, d_out: np.ndarray):
    """Backprop through the cached forward pass.

    Returns (flat parameter gradient, gradient w.r.t. the input batch).
    ReLU takes subgradient 0 at 0.
    """
    inputs, pres = cache
    d = np.asarray(d_out, dtype=np.float64)
    grad = np.zeros(spec.n_params)
    gpv = ParamVector(grad, spec.layout())
    for i in reversed(range(spec.n_layers)):
        if spec.activation == "relu" and i < spec.n_layers - 1:
            d = d * (pres[i] > 0.0)
        if spec.bias[i]:
            gpv.tensor(f"layer{i}.bias")[...] = d.sum(axis=0)
        gpv.tensor(f"layer{i}.weight")[...] = inputs[i].T @ d
        d = d @ params.tensor(f"layer{i}.weight").T
    return grad, d


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction for stability."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient w.r.t. the logits.

    grad = (softmax(logits) - onehot(labels)) / n_rows, so that
    d(loss)/d(logits) is exact for the mean reduction.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        bad = int(labels[(labels < 0) | (labels >= k)][0])
        raise IndexError(f"label {bad} out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Unreduced cross-entropy, one value per row."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    return logsumexp - shifted[np.arange(len(labels)), labels]


def mlp_loss_and_grad(params: ParamVector, spec: MlpSpec, batch: np.ndarray, labels: np.ndarray):
    """Cross-entropy of the MLP on a batch and its flat parameter gradient."""
    logits, cache = forward_cached(params, spec, batch)
    loss, d_logits = softmax_cross_entropy(logits, labels)
    grad, _ = backward(params, spec, cache, d_logits)
    return loss, grad


def cosine_lr(step: int, total: int, lr0: float, eta_min: float) -> float:
    """Cosine annealing from lr0 at step 0 to eta_min at step == total."""
    if total < 1:
        raise ValueError(f"total steps must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimizerState:
    """SGD-with-momentum state driving a cosine-annealed schedule.

    Update rule (classic coupled weight decay):
        v <- m * v + (g + wd * theta)
        theta <- theta - lr(step) * v
    """

    lr0: float
    momentum_coef: float
    weight_decay: float
    total_steps: int
    eta_min: float = 0.0
    step: int = 0
    velocity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr0, self.eta_min)


def sgd_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> None:
    """One in-place momentum-SGD update on the trainable slice."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ShapeError(f"grad shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        idx = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError(f"non-finite gradient at component {idx}")
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    lr = state.lr()
    state.velocity *= state.momentum_coef
    state.velocity += grad + state.weight_decay * params
    params -= lr * state.velocity
    state.step += 1


@dataclass
class FiniteDiffReport:
    max_rel_deviation: float
    worst_coordinate: int
    checked: int
    passed: bool


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    grad: np.ndarray,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    rng: np.random.Generator | None = None,
    n_coords: int = 50,
) -> FiniteDiffReport:
    """Compare an analytic gradient against central differences.

    Checks a random coordinate subset (all coordinates if the vector is
    small or no rng is given).  Relative deviation uses
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if rng is not None and params.size > n_coords:
        coords = rng.choice(params.size, size=n_coords, replace=False)
    else:
        coords = np.arange(params.size)
    worst = -1
    worst_dev = 0.0
    for c in coords:
        theta = params.copy()
        theta[c] += h
        up = loss_fn(theta)
        theta[c] -= 2 * h
        down = loss_fn(theta)
        numeric = (up - down) / (2 * h)
        dev = abs(grad[c] - numeric) / max(1.0, abs(grad[c]), abs(numeric))
        if dev > worst_dev:
            worst_dev = dev
            worst = int(c)
    return FiniteDiffReport(worst_dev, worst, len(coords), worst_dev <= tolerance)
