"""Tensor primitives, reverse-mode gradients and the seeded generator.

Tensors are ``torch.Tensor`` objects.  The computation record for a
backward sweep is the autograd graph hanging off each result, so every run
owns its own record and nothing global is mutated.  ``primitive_forward``
exposes the primitive catalogue the rest of the package relies on, with
shape validation in front of each op.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DTYPE = torch.float32


class ShapeError(ValueError):
    """Raised when the inputs of a primitive do not satisfy its shape rule."""


def _mismatch(op: str, a: Tensor, b: Tensor, why: str = "") -> ShapeError:
    msg = f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
    return ShapeError(f"{msg} ({why})" if why else msg)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise _mismatch(op, a, b, "operands must have identical shapes")


def _conv_check(op, x, w, transposed=False):
    if x.dim() != 4 or w.dim() != 4:
        raise _mismatch(op, x, w, "expected NCHW input and 4-D kernel")
    cin = w.shape[0] if transposed else w.shape[1]
    if x.shape[1] != cin:
        raise _mismatch(op, x, w, f"input has {x.shape[1]} channels, kernel expects {cin}")


def _add(a, b):
    _same_shape("add", a, b)
    return a + b


def _subtract(a, b):
    _same_shape("subtract", a, b)
    return a - b


def _multiply(a, b):
    _same_shape("multiply", a, b)
    return a * b


def _matmul(a, b):
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch("matmul", a, b, "need (n, k) @ (k, m)")
    return a @ b


def _conv2d(x, weight, bias=None, stride=1, padding=None):
    _conv_check("conv2d", x, weight)
    if padding is None:
        padding = weight.shape[-1] // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def _conv_transpose2d(x, weight, bias=None, stride=1, padding=None, output_padding=0):
    _conv_check("conv_transpose2d", x, weight, transposed=True)
    if padding is None:
        padding = weight.shape[-1] // 2
    return F.conv_transpose2d(
        x, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )


def _sum(x, dim=None):
    # float64 accumulation, result cast back to the input dtype
    out = x.to(torch.float64).sum() if dim is None else x.to(torch.float64).sum(dim)
    return out.to(x.dtype)


def _mean(x, dim=None):
    out = x.to(torch.float64).mean() if dim is None else x.to(torch.float64).mean(dim)
    return out.to(x.dtype)


def _reshape(x, shape):
    if math.prod(shape) != x.numel():
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {tuple(shape)}")
    return x.reshape(shape)


def _concat(*xs, dim=1):
    ref = xs[0]
    for other in xs[1:]:
        if other.dim() != ref.dim() or any(
            i != dim and s != t for i, (s, t) in enumerate(zip(ref.shape, other.shape))
        ):
            raise _mismatch("concat", ref, other, f"must agree off axis {dim}")
    return torch.cat(xs, dim=dim)


def _slice(x, start, stop, dim=1):
    if not 0 <= start < stop <= x.shape[dim]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for {tuple(x.shape)} axis {dim}")
    return x.narrow(dim, start, stop - start)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": _add,
    "subtract": _subtract,
    "multiply": _multiply,
    "exp": torch.exp,
    "matmul": _matmul,
    "conv2d": _conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "leaky_relu": lambda x, slope=0.01: F.leaky_relu(x, slope),
    "relu": F.relu,
    "sigmoid": torch.sigmoid,
    "sin": torch.sin,
    "cos": torch.cos,
    "sum": _sum,
    "mean": _mean,
    "reshape": _reshape,
    "concat": _concat,
    "slice": _slice,
    "clamp": lambda x, low, high: torch.clamp(x, low, high),
}


def primitive_forward(op_kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Evaluate one catalogued primitive.

    The result joins the autograd record whenever any input requires a
    gradient.  Unknown op names raise ``KeyError``; inputs that violate the
    op's shape rule raise :class:`ShapeError` naming the op and both shapes.
    """
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise KeyError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **attrs)


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to each named tensor.

    The record is released after the sweep.  Tensors that do not influence
    the loss get a zero gradient of their own shape.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(wrt)
    grads = torch.autograd.grad(
        loss.reshape(()), [wrt[n] for n in names], allow_unused=True
    )
    return {
        n: torch.zeros_like(wrt[n]) if g is None else g for n, g in zip(names, grads)
    }


def gradient_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` is evaluated on a float64 copy of ``x`` so the finite-difference
    side is not swamped by float32 rounding; callers holding parameters must
    pass a function whose parameters are float64 as well.  The denominator
    per element is ``max(|analytic|, |numeric|, 1e-6)``.
    """
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    out = fn(x64)
    if out.numel() != 1:
        raise ShapeError(f"gradient_check: fn must be scalar-valued, got {tuple(out.shape)}")
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out.reshape(()), [x64], allow_unused=True)
    else:
        analytic = None
    if analytic is None:
        analytic = torch.zeros_like(x64)

    numeric = torch.zeros_like(x64)
    flat = x64.detach().clone().reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn(flat.reshape(x64.shape)).item()
            flat[i] = orig - eps
            lo = fn(flat.reshape(x64.shape)).item()
            flat[i] = orig
            numeric.view(-1)[i] = (hi - lo) / (2 * eps)

    a, n = analytic.detach(), numeric
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, 1e-6))
    return float(((a - n).abs() / denom).max())


class Rng:
    """Seeded Philox-4x64 stream (numpy's counter-based generator).

    Philox output depends only on (key, counter), so a seed reproduces the
    same stream on every platform.  ``child`` derives independent named
    streams so stages do not perturb each other's draws.
    """

    def __init__(self, seed: int, _key: Sequence[int] = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self._key]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "Rng":
        tag = int.from_bytes(name.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        return Rng(self.seed, (*self._key, tag, len(name)))

    def normal(self, shape, std: float = 1.0) -> Tensor:
        arr = self._gen.standard_normal(tuple(shape), dtype=np.float64) * std
        return torch.from_numpy(arr.astype(np.float32))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        arr = self._gen.uniform(low, high, size=tuple(shape))
        return torch.from_numpy(arr.astype(np.float32))

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    @property
    def numpy(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        state = self._gen.bit_generator.state
        return _jsonable(state)

    def set_state(self, state: dict) -> None:
        inner = state["state"]
        self._gen.bit_generator.state = {
            **state,
            "state": {k: np.asarray(v, dtype=np.uint64) for k, v in inner.items()},
            "buffer": np.asarray(state["buffer"], dtype=np.uint64),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
