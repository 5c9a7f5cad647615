#!/usr/bin/env python3
"""
Dense Tensor Engine with Reverse-Mode Differentiation
Implements exactly the layer set the CQural trunk needs plus the Adam optimizer
"""

import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lab_errors import DimensionError, NumericError, ParameterError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def as_mode(mode: Union["Mode", str]) -> "Mode":
    if isinstance(mode, Mode):
        return mode
    try:
        return Mode(str(mode).lower())
    except ValueError:
        raise UsageError(f"unknown mode '{mode}', expected train or eval")


class Tensor:
    """Row-major float64 array with an optional gradient and a handle into the active tape"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeNode:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of taped operations; inputs of a node always precede it"""

    nodes: List[TapeNode] = field(default_factory=list)

    def __post_init__(self):
        self._tokens = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> Tensor:
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(TapeNode(kind, inputs, output, backward))
        return output

    def clear(self):
        for node in self.nodes:
            node.output.node_id = None
            node.output._tape = None
        self.nodes = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def record_op(kind: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and any input is differentiable"""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def uniform_init(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, name: Optional[str] = None) -> Tensor:
    """Uniform in ±1/sqrt(fan_in)"""
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


# ---------------------------------------------------------------- layer ops

def conv2d_valid(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation with stride 1: N×Cin×H×W, Cout×Cin×K×K -> N×Cout×(H-K+1)×(W-K+1)"""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be N×C×H×W, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d kernels must be Cout×Cin×K×K, got shape {kernels.shape}")
    n, c_in, height, width = x.shape
    c_out, k_in, k, _ = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"channel axis 1 mismatch: input has {c_in}, kernels expect {k_in}")
    if k > height:
        raise DimensionError(f"height axis 2 too small: kernel {k} > {height}")
    if k > width:
        raise DimensionError(f"width axis 3 too small: kernel {k} > {width}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias axis 0 must have {c_out} entries, got shape {bias.shape}")

    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        grad_kernels = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = g.sum(axis=(0, 2, 3))
        padded = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        g_windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        flipped = kernels.data[:, :, ::-1, ::-1]
        grad_x = np.tensordot(g_windows, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return grad_x, grad_kernels, grad_bias

    return record_op("conv2d_valid", (x, kernels, bias), np.ascontiguousarray(out), backward)


def linear_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight·x + bias for a vector of length D or a batch N×D"""
    if weight.ndim != 2:
        raise DimensionError(f"weight must be M×D, got shape {weight.shape}")
    m, d = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise DimensionError(f"input last axis must have {d} entries, got shape {x.shape}")
    if bias.shape != (m,):
        raise DimensionError(f"bias must have {m} entries, got shape {bias.shape}")

    out = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray):
        grad_x = g @ weight.data
        if x.ndim == 1:
            grad_w = np.outer(g, x.data)
            grad_b = g.copy()
        else:
            grad_w = g.T @ x.data
            grad_b = g.sum(axis=0)
        return grad_x, grad_w, grad_b

    return record_op("linear_affine", (x, weight, bias), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return record_op("relu", (x,), x.data * mask, backward)


def dropout2d(x: Tensor, p: float, mode: Union[Mode, str], rng: Optional[np.random.Generator] = None) -> Tensor:
    """Channel dropout with inverted scaling; identity in eval mode"""
    mode = as_mode(mode)
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1], got {p}")
    if mode is Mode.EVAL or p == 0.0:
        return x
    if p >= 1.0:
        raise ParameterError("dropout probability 1 drops every channel in train mode")
    if x.ndim != 4:
        raise DimensionError(f"dropout2d input must be N×C×H×W, got shape {x.shape}")
    if rng is None:
        raise UsageError("dropout2d in train mode needs a seeded generator")

    keep = (rng.random(x.shape[:2]) >= p) / (1.0 - p)
    mask = keep[:, :, None, None]

    def backward(g: np.ndarray):
        return (g * mask,)

    return record_op("dropout2d", (x,), x.data * mask, backward)


def flatten(x: Tensor) -> Tensor:
    """N×... -> N×D"""
    original = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(original),)

    return record_op("flatten", (x,), x.data.reshape(original[0], -1), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return record_op("tanh", (x,), out, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return record_op("scale", (x,), x.data * factor, backward)


def identity(x: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (g,)

    return record_op("identity", (x,), x.data.copy(), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def backward(g: np.ndarray):
        return g, g

    return record_op("add", (a, b), a.data + b.data, backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op("sum", (x,), np.asarray(x.data.sum()), backward)


def take_rows(x: Tensor, rows: Union[int, Sequence[int]]) -> Tensor:
    """Rows of the leading axis; an int index drops that axis"""
    index = np.asarray(rows, dtype=np.int64)

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record_op("take_rows", (x,), x.data[index], backward)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over N×K logits"""
    if x.ndim != 2:
        raise DimensionError(f"log_softmax expects N×K logits, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g: np.ndarray):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return record_op("log_softmax", (x,), out, backward)


def nll_loss(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the labelled classes"""
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.ndim != 2 or log_probs.shape[0] != labels.shape[0]:
        raise DimensionError(f"nll_loss needs N×K log-probabilities for {labels.shape[0]} labels, got {log_probs.shape}")
    n = labels.shape[0]
    rows = np.arange(n)
    out = -log_probs.data[rows, labels].mean()

    def backward(g: np.ndarray):
        grad = np.zeros_like(log_probs.data)
        grad[rows, labels] = -np.asarray(g).item() / n
        return (grad,)

    return record_op("nll_loss", (log_probs,), np.asarray(out), backward)


def channel_weighted_sum(activations: Tensor, weights: np.ndarray) -> Tensor:
    """sum_k weights[k]·A[k] for C×H×W activations; weights are constants"""
    weights = np.asarray(weights, dtype=np.float64)
    if activations.ndim != 3 or weights.shape != (activations.shape[0],):
        raise DimensionError(f"need C×H×W activations and C weights, got {activations.shape} and {weights.shape}")

    def backward(g: np.ndarray):
        return (weights[:, None, None] * g[None, :, :],)

    return record_op("channel_weighted_sum", (activations,), np.tensordot(weights, activations.data, axes=1), backward)


def squared_distance(x: Tensor, target: np.ndarray) -> Tensor:
    """Squared Frobenius distance to a constant array"""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != x.shape:
        raise DimensionError(f"squared_distance needs equal shapes, got {x.shape} and {target.shape}")
    diff = x.data - target

    def backward(g: np.ndarray):
        return (2.0 * np.asarray(g).item() * diff,)

    return record_op("squared_distance", (x,), np.asarray((diff * diff).sum()), backward)


# ---------------------------------------------------------------- backward

def backward_pass(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
    """
    Reverse sweep from a scalar loss. Without `wrt`, gradients accumulate into every
    differentiable leaf; with `wrt`, only the listed tensors (leaf or intermediate) get `.grad`.
    The tape is cleared afterwards.
    """
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise UsageError("backward_pass needs a loss recorded on a tape")
    if loss.size != 1:
        raise UsageError(f"backward_pass needs a scalar loss, got shape {loss.shape}")

    targets = None if wrt is None else {id(t) for t in wrt}
    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}

    for index in range(loss.node_id, -1, -1):
        g = pending.pop(index, None)
        if g is None:
            continue
        node = tape.nodes[index]
        if targets is not None and id(node.output) in targets:
            node.output.grad = g.copy()
        for tensor, grad in zip(node.inputs, node.backward(g)):
            if grad is None:
                continue
            if tensor._tape is tape and tensor.node_id is not None:
                if tensor.node_id in pending:
                    pending[tensor.node_id] = pending[tensor.node_id] + grad
                else:
                    pending[tensor.node_id] = grad
            elif tensor.requires_grad and (targets is None or id(tensor) in targets):
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad

    tape.clear()
    for tensor in (wrt or ()):
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            raise NumericError(f"non-finite gradient for {tensor!r}")


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def _named(params: Union[Dict[str, Tensor], Sequence[Tensor]]) -> List[Tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def adam_step(params: Union[Dict[str, Tensor], Sequence[Tensor]], state: AdamState) -> AdamState:
    """One bias-corrected Adam update; gradients are consumed"""
    named = _named(params)
    for name, param in named:
        if param.grad is None:
            raise UsageError(f"parameter '{name}' has no gradient; run backward_pass first")
        if name in state.m and state.m[name].shape != param.shape:
            raise DimensionError(f"optimizer state for '{name}' has shape {state.m[name].shape}, parameter {param.shape}")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in named:
        g = param.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        param.data = param.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.grad = None
    return state
