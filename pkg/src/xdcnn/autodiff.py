"""Dense tensors, a recording tape, reverse-mode differentiation and SGD.

The primitive set is deliberately small: everything the cross-domain network
needs and nothing more.  Every primitive records itself on the active
:class:`Tape` (if any input requires a gradient) together with a closure that
maps the output gradient to input gradients.

Tensors are NCHW.  Data is float32 unless a tensor is explicitly created as
float64, which is only done for gradient checking.
"""

from __future__ import annotations

import contextvars
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NonFiniteError, StaleTapeError, ValidationError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "xdcnn_active_tape", default=None
)
# list of boolean masks, appended to by relu() while a probe is active
_relu_probe: contextvars.ContextVar["list | None"] = contextvars.ContextVar(
    "xdcnn_relu_probe", default=None
)


class Tensor:
    """A dense float array with an optional gradient buffer.

    ``decay`` marks whether SGD applies weight decay to this tensor; batch
    norm affine parameters are created with ``decay=False``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "decay")

    def __init__(self, data, requires_grad=False, dtype=None, name=None, decay=True):
        arr = np.array(data, dtype=dtype or np.float32)
        if arr.dtype not in (np.float32, np.float64):
            raise ValidationError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.decay = decay

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t.decay = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives called inside the block are
    recorded.  A tape supports exactly one :func:`backward` pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteError(f"non-finite value in {what} at flat index {bad}")


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    _check_finite(out, op)
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        if tape.consumed:
            raise StaleTapeError("cannot record on a tape that has been differentiated")
        tape.nodes.append(Node(op, inputs, result, backward))
    return result


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, kernel: Tensor, pad: int = 0) -> Tensor:
    """Bias-free stride-1 cross-correlation with zero padding.

    ``x`` is [N, Cin, H, W] (or [Cin, H, W], treated as a batch of one) and
    ``kernel`` is [Cout, Cin, kH, kW].  The network only uses odd kernels;
    even ones are accepted and anchor at the top-left.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    k = kernel.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ValidationError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ValidationError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if pad < 0 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValidationError(f"padded input {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}")
    if xd.dtype != k.dtype:
        raise ValidationError(f"conv2d dtype mismatch: {xd.dtype} vs {k.dtype}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if kh == 1 and kw == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kmat = k.reshape(cout, -1)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dk = (gm.T @ cols).reshape(k.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ kmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            if squeeze:
                dx = dx[0]
        return dx, dk

    return _emit("conv2d", (x, kernel), out, backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    initialized: bool = False

    @classmethod
    def zeros(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * batch_mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1 - m) * batch_var).astype(self.var.dtype)
        self.initialized = True


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    stats: RunningStats,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Per-channel batch normalization of [N, C, H, W] input.

    Train mode normalizes with the biased batch variance over N*H*W and
    updates ``stats``; eval mode uses the running statistics.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValidationError(f"batchnorm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValidationError(f"batchnorm affine shape mismatch for {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)
    count = n * h * w

    if mode == "train":
        if count < 2:
            raise ValidationError("batchnorm train mode needs at least 2 samples per channel")
        # corrected two-pass mean keeps float32 offsets from leaking through
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64).astype(xd.dtype)
        centered = xd - mean.reshape(1, c, 1, 1)
        fix = centered.mean(axis=(0, 2, 3), dtype=np.float64).astype(xd.dtype)
        centered -= fix.reshape(1, c, 1, 1)
        mean = mean + fix
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        stats.update(mean, var)
    elif mode == "eval":
        if not stats.initialized:
            raise ValidationError("uninitialized statistics: batchnorm eval before any training update")
        mean = stats.mean.astype(xd.dtype)
        inv_std = (1.0 / np.sqrt(stats.var.astype(xd.dtype) + eps)).astype(xd.dtype)
        xhat = (xd - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    else:
        raise ValidationError(f"unknown batchnorm mode {mode!r}")

    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if mode == "train":
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = (inv_std.reshape(1, c, 1, 1) / count) * (count * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    probe = _relu_probe.get()
    if probe is not None:
        probe.append(mask)
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * mask,)

    return _emit("relu", (x,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValidationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis ([C,H,W] or [N,C,H,W])."""
    if not parts:
        raise ValidationError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ValidationError(f"concat_channels spatial mismatch: {p.shape} vs {ref}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-3)

    def backward(g):
        return tuple(
            np.ascontiguousarray(g[..., bounds[i]:bounds[i + 1], :, :]) for i in range(len(parts))
        )

    return _emit("concat_channels", tuple(parts), out, backward)


def center_pixel(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] at spatial position (H//2, W//2)."""
    if x.ndim != 4:
        raise ValidationError(f"center_pixel expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    cy, cx = h // 2, w // 2
    out = np.ascontiguousarray(x.data[:, :, cy, cx])

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, cy, cx] = g
        return (dx,)

    return _emit("center_pixel", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum_all", (x,), out, lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant array of the same shape."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ValidationError(f"weighted_sum shape mismatch: {x.shape} vs {weights.shape}")
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)
    return _emit("weighted_sum", (x,), out, lambda g: (g * weights,))


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [N, C] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValidationError(f"softmax_xent expects [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    if n < 1 or labels.shape != (n,):
        raise ValidationError(f"softmax_xent needs {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        d = ez / denom
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _emit("softmax_xent", (logits,), out, backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> list[Tensor]:
    """Backpropagate from a scalar ``loss`` through ``tape``.

    Gradient buffers of every leaf that requires a gradient are zeroed and
    then filled with d(loss)/d(leaf).  Returns those leaves in first-use order.
    """
    if tape.consumed:
        raise StaleTapeError("tape already differentiated; re-run the forward pass")
    if loss.ndim != 0:
        raise ValidationError(f"backward root must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not depend on any tensor requiring a gradient")

    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in leaves:
                leaves[id(t)] = t

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    tape.consumed = True

    for key, leaf in leaves.items():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        g = grads.get(key)
        if g is None:
            leaf.grad[...] = 0
        else:
            _check_finite(g, f"gradient of {leaf.name or 'leaf'}")
            leaf.grad[...] = g
    return list(leaves.values())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    """Heavy-ball SGD state: one zero-initialized velocity per parameter."""

    momentum: float
    weight_decay: float
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], momentum: float, weight_decay: float) -> "SgdState":
        state = cls(momentum, weight_decay)
        for p in params:
            state.velocity[id(p)] = np.zeros_like(p.data)
        return state


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray] | None,
    state: SgdState,
    lr: float,
    *,
    decay_scale: float = 1.0,
) -> None:
    """In-place update ``v = momentum*v + lr*(g + wd*w); w -= v``.

    ``grads`` defaults to each parameter's ``.grad``.  Parameters created with
    ``decay=False`` get no weight decay.  ``decay_scale`` multiplies the
    decay coefficient for the whole group.
    """
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        try:
            v = state.velocity[id(p)]
        except KeyError:
            raise ValidationError(f"no velocity buffer for parameter {p.name!r}") from None
        wd = state.weight_decay * decay_scale if p.decay else 0.0
        step = g + wd * p.data if wd else g
        v *= state.momentum
        v += lr * step
        p.data -= v
        _check_finite(p.data, f"parameter {p.name or '?'} after sgd step")


# ---------------------------------------------------------------------------
# tensor serialization (checkpoint fragments)

_U32 = struct.Struct("<I")


def write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> int:
    """Write one named tensor record; returns bytes written."""
    raw_name = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    parts = [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
    parts += [_U32.pack(d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr).tobytes())
    blob = b"".join(parts)
    fh.write(blob)
    return len(blob)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_u32(fh: BinaryIO) -> int:
    return _U32.unpack(_read_exact(fh, 4))[0]


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    name_len = read_u32(fh)
    name = _read_exact(fh, name_len).decode("utf-8")
    rank = read_u32(fh)
    dims = tuple(read_u32(fh) for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims)
    return name, arr.astype(np.float32)
