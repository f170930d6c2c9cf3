"""Dense float64 tensors with a recorded graph and reverse-mode gradients.

Only the operations the network needs are provided. Every operation is a
:class:`Function` subclass; calling ``apply`` runs the forward pass on the
input arrays and, when any input requires gradients and a :class:`Graph` is
active, records the node on it. :func:`backward` replays that graph in
reverse. Outside a ``with Graph()`` block nothing is recorded and results do
not require gradients.
"""

import logging
import threading
from abc import abstractmethod
from typing import Any, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from CobNet.errors import DimensionError, UsageError, ValidationError
from Utilities.helpers import adaptive_bins

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]
ElementwiseKind = Literal["mul", "add", "sub", "one_minus"]


class Tensor:
    """A float64 value array with optional gradient tracking.

    The data array is owned by the tensor and never mutated after creation;
    only ``grad`` changes, and only when ``requires_grad`` is set.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.data.flags.writeable = False
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional["Function"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor {self.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def assign(self, values: ArrayLike) -> None:
        """Rebind the data to new values of the same shape (optimiser updates)."""
        data = np.array(values, dtype=np.float64)
        if data.shape != self.shape:
            raise DimensionError(f"cannot assign shape {data.shape} to tensor {self.shape}")
        data.flags.writeable = False
        self.data = data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data: ArrayLike) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


class Graph:
    """Ordered record of the operations executed while this graph is active.

    Used as a context manager the graph becomes the recorder for the current
    thread and is cleared on exit. A thread with no active graph records
    nothing. Clearing drops every recorded node and the links from outputs
    to their creators; leaf tensors are untouched.
    """

    def __init__(self) -> None:
        self.nodes: List["Function"] = []

    def record(self, node: "Function") -> None:
        node.graph = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.release()
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _graph_stack().pop()
        self.clear()


_thread_state = threading.local()


def _graph_stack() -> List[Graph]:
    stack = getattr(_thread_state, "stack", None)
    if stack is None:
        stack = []
        _thread_state.stack = stack
    return stack


def current_graph() -> Optional[Graph]:
    """The graph new operations are recorded on in this thread, if any."""
    stack = _graph_stack()
    return stack[-1] if stack else None


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: Tensor):
        self.inputs: Tuple[Tensor, ...] = inputs
        self.output: Optional[Tensor] = None
        self.graph: Optional[Graph] = None

    @abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        """Map dL/d(output) to dL/d(input) for every input, in order."""
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*inputs)
        out_data = func.forward(*(tensor.data for tensor in inputs), **kwargs)
        graph = current_graph()
        requires_grad = graph is not None and any(tensor.requires_grad for tensor in inputs)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            out.creator = func
            func.output = out
            graph.record(func)
        return out

    def release(self) -> None:
        if self.output is not None:
            self.output.creator = None
        self.output = None
        self.inputs = ()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Gradients add up across repeated uses of a tensor and across repeated
    calls; call ``zero_grad`` on parameters between optimisation steps.

    Raises:
        UsageError: If ``loss`` is not a scalar or does not require gradients.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError(
            "loss does not depend on any tensor that requires gradients"
            " (operations outside a Graph block are not recorded)"
        )

    seed = np.ones_like(loss.data)
    if loss.creator is None:
        loss.accumulate_grad(seed)
        return

    graph = loss.creator.graph
    if graph is None:
        raise UsageError("loss was produced outside any recorded graph")

    pending = {id(loss): seed}
    owners = {id(loss): loss}
    for node in reversed(graph.nodes):
        out = node.output
        if out is None or id(out) not in pending:
            continue
        grad = pending.pop(id(out))
        out.accumulate_grad(grad)
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + input_grad
            else:
                pending[key] = input_grad
                owners[key] = tensor

    # what is left are leaves
    for key, grad in pending.items():
        owners[key].accumulate_grad(grad)


def _check_chw(array: np.ndarray, name: str) -> None:
    if array.ndim != 3:
        raise DimensionError(f"{name} must be c x h x w, got shape {array.shape}")


class Conv2d(Function):
    """Stride-1 convolution with 1x1 or padded 3x3 kernels.

    3x3 kernels pad by one pixel: zeros by default, or by repeating the border
    (``padding="edge"``) so constant maps stay constant.
    """

    def forward(
        self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray, padding: str = "zeros"
    ) -> np.ndarray:
        _check_chw(x, "conv2d input")
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] not in (1, 3):
            raise DimensionError(f"conv2d weight must be c_out x c_in x k x k with k in (1, 3), got {weight.shape}")
        c_out, c_in, k, _ = weight.shape
        if c_in != x.shape[0]:
            raise DimensionError(f"conv2d weight expects {c_in} input channels, input has {x.shape[0]}")
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
        if padding not in ("zeros", "edge"):
            raise ValidationError(f"unknown padding {padding!r}")

        pad = k // 2
        _, h, w = x.shape
        mode = "constant" if padding == "zeros" else "edge"
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode=mode)
        windows = sliding_window_view(padded, (k, k), axis=(1, 2))
        self.cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h * w)
        self.geometry = (c_in, c_out, k, h, w)
        self.padding = padding
        out = weight.reshape(c_out, -1) @ self.cols + bias[:, None]
        return out.reshape(c_out, h, w)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        c_in, c_out, k, h, w = self.geometry
        weight = self.inputs[1].data
        flat = grad.reshape(c_out, h * w)

        grad_weight = (flat @ self.cols.T).reshape(weight.shape)
        grad_bias = flat.sum(axis=1)

        pad = k // 2
        grad_cols = (weight.reshape(c_out, -1).T @ flat).reshape(c_in, k, k, h, w)
        grad_padded = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
        for dy in range(k):
            for dx in range(k):
                grad_padded[:, dy : dy + h, dx : dx + w] += grad_cols[:, dy, dx]
        if pad and self.padding == "edge":
            # border copies fold back onto the pixels they repeat
            grad_padded[:, 1, :] += grad_padded[:, 0, :]
            grad_padded[:, -2, :] += grad_padded[:, -1, :]
            grad_padded[:, :, 1] += grad_padded[:, :, 0]
            grad_padded[:, :, -2] += grad_padded[:, :, -1]
        grad_x = grad_padded[:, pad : pad + h, pad : pad + w]
        return grad_x, grad_weight, grad_bias


def adaptive_pool_matrix(size: int, bins: int) -> np.ndarray:
    """Row-stochastic ``bins x size`` matrix averaging each adaptive bin."""
    matrix = np.zeros((bins, size))
    for i, (start, stop) in enumerate(adaptive_bins(size, bins)):
        matrix[i, start:stop] = 1.0 / (stop - start)
    return matrix


def bilinear_matrix(size: int, out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, ``out x size``."""
    matrix = np.zeros((out, size))
    for i in range(out):
        source = i * (size - 1) / (out - 1) if out > 1 else (size - 1) / 2
        low = min(int(np.floor(source)), size - 1)
        high = min(low + 1, size - 1)
        frac = source - low
        matrix[i, low] += 1.0 - frac
        matrix[i, high] += frac
    return matrix


class _SeparableLinear(Function):
    """``out[c] = rows @ x[c] @ cols.T`` for fixed row/column matrices."""

    rows: Optional[np.ndarray] = None
    cols: Optional[np.ndarray] = None

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.rows is None or self.cols is None:
            return (grad,)
        return (self.rows.T @ grad @ self.cols,)


class AdaptiveAvgPool(_SeparableLinear):
    def forward(self, x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        _check_chw(x, "adaptive_avg_pool input")
        _, h, w = x.shape
        if not (1 <= out_h <= h and 1 <= out_w <= w):
            raise DimensionError(f"cannot pool {h}x{w} into {out_h}x{out_w}")
        self.rows = adaptive_pool_matrix(h, out_h)
        self.cols = adaptive_pool_matrix(w, out_w)
        return self.rows @ x @ self.cols.T


class BilinearResize(_SeparableLinear):
    def forward(self, x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        _check_chw(x, "bilinear_resize input")
        if out_h < 1 or out_w < 1:
            raise DimensionError(f"cannot resize to {out_h}x{out_w}")
        _, h, w = x.shape
        if (out_h, out_w) == (h, w):
            self.rows = None
            return x.copy()
        self.rows = bilinear_matrix(h, out_h)
        self.cols = bilinear_matrix(w, out_w)
        return self.rows @ x @ self.cols.T


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        # split by sign so exp never overflows
        positive = x >= 0
        z = np.exp(-np.abs(x))
        # exp underflows to 0 past -745; keep the output strictly positive
        self.out = np.maximum(np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z)), np.finfo(np.float64).tiny)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.active = x > 0
        return np.where(self.active, x, 0.0)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.active,)


class SoftmaxCrossEntropy(Function):
    """Mean per-pixel cross-entropy of 2-channel logits against a binary mask."""

    def forward(self, logits: np.ndarray, target: np.ndarray) -> np.ndarray:
        if logits.ndim != 3 or logits.shape[0] != 2:
            raise DimensionError(f"logits must be 2 x h x w, got {logits.shape}")
        target = np.asarray(target)
        if target.shape != logits.shape[1:]:
            raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape[1:]}")
        if not np.isin(target, (0, 1)).all():
            raise ValidationError("cross-entropy target values must be 0 or 1")

        labels = target.astype(np.int64)
        shifted = logits - logits.max(axis=0, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
        log_probs = shifted - log_norm
        picked = np.take_along_axis(log_probs, labels[None], axis=0)[0]

        self.probs = np.exp(log_probs)
        self.onehot = np.stack([labels == 0, labels == 1]).astype(np.float64)
        return np.asarray(-picked.mean())

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        pixels = self.onehot[0].size
        return (grad * (self.probs - self.onehot) / pixels,)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0, keepdims=True)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if a.ndim == 3 and b.ndim == 3 and a.shape[1:] == b.shape[1:] and 1 in (a.shape[0], b.shape[0]):
        return
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


class Elementwise(Function):
    """Binary mul/add/sub with the single 1 x h x w channel-broadcast rule."""

    def forward(self, a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
        _check_broadcast(a, b)
        self.kind = kind
        if kind == "mul":
            return a * b
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        raise ValidationError(f"unknown elementwise kind {kind!r}")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, b = (tensor.data for tensor in self.inputs)
        if self.kind == "mul":
            grad_a, grad_b = grad * b, grad * a
        elif self.kind == "add":
            grad_a, grad_b = grad, grad
        else:
            grad_a, grad_b = grad, -grad
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


class OneMinus(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return 1.0 - a

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (-grad,)


class Scale(Function):
    def forward(self, a: np.ndarray, factor: float) -> np.ndarray:
        self.factor = float(factor)
        return a * self.factor

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.factor,)


class Sum(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a.sum())

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.full(self.inputs[0].shape, float(grad)),)


class ConcatChannels(Function):
    def forward(self, *parts: np.ndarray) -> np.ndarray:
        if not parts:
            raise DimensionError("concat_channels needs at least one part")
        for part in parts:
            _check_chw(part, "concat_channels part")
            if part.shape[1:] != parts[0].shape[1:]:
                raise DimensionError(f"spatial mismatch: {part.shape[1:]} vs {parts[0].shape[1:]}")
        self.splits = np.cumsum([part.shape[0] for part in parts])[:-1]
        return np.concatenate(parts, axis=0)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return np.split(grad, self.splits, axis=0)


class ChannelSlice(Function):
    def forward(self, a: np.ndarray, start: int, stop: int) -> np.ndarray:
        _check_chw(a, "channel_slice input")
        if not 0 <= start < stop <= a.shape[0]:
            raise DimensionError(f"channel range [{start}, {stop}) outside {a.shape[0]} channels")
        self.start, self.stop = start, stop
        return a[start:stop].copy()

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros(self.inputs[0].shape)
        full[self.start : self.stop] = grad
        return (full,)


def conv2d(input: Tensor, weight: Tensor, bias: Tensor, padding: str = "zeros") -> Tensor:
    """Same-size convolution; the kernel size (1 or 3) is read from ``weight``."""
    return Conv2d.apply(input, weight, bias, padding=padding)


def adaptive_avg_pool(input: Tensor, out_h: int, out_w: int) -> Tensor:
    return AdaptiveAvgPool.apply(input, out_h=out_h, out_w=out_w)


def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    return BilinearResize.apply(input, out_h=out_h, out_w=out_w)


def sigmoid(input: Tensor) -> Tensor:
    return Sigmoid.apply(input)


def relu(input: Tensor) -> Tensor:
    return Relu.apply(input)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy; channel 0 is background, channel 1 is object."""
    return SoftmaxCrossEntropy.apply(logits, target=target)


def elementwise(a: Tensor, b: Optional[Tensor], kind: ElementwiseKind) -> Tensor:
    if kind == "one_minus":
        return OneMinus.apply(a)
    if b is None:
        raise UsageError(f"elementwise {kind} needs two operands")
    return Elementwise.apply(a, b, kind=kind)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def one_minus(a: Tensor) -> Tensor:
    return elementwise(a, None, "one_minus")


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def tensor_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def add_all(tensors: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of equally shaped tensors."""
    if not tensors:
        raise UsageError("add_all needs at least one tensor")
    total = tensors[0]
    for tensor in tensors[1:]:
        total = add(total, tensor)
    return total


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    return ConcatChannels.apply(*parts)


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    return ChannelSlice.apply(a, start=start, stop=stop)
