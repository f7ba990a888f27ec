"""Dense tensors and reverse-mode differentiation on an explicit tape.

The engine is deliberately small: 1-D/2-D tensors, matrix products, and the
elementwise functions the encoder and recurrent head need. A ``Tape`` records
every differentiable operation in execution order and ``backward`` replays the
records exactly once in reverse. Broadcasting is restricted to bias addition
over the last axis; any other shape mismatch raises ``ShapeError``.

Precision is whatever dtype the leaf tensors carry: float32 in training,
float64 when gradients are being verified against finite differences.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GraphError, ShapeError

_INV_SQRT2 = 0.7071067811865476     # 1 / sqrt(2)
_INV_SQRT_2PI = 0.3989422804014327  # 1 / sqrt(2 * pi)

ACTIVATION_KINDS = ("gelu", "sigmoid", "tanh")


class Tensor:
    """N-d float array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = data if type(data) is np.ndarray else np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """Leaf copy of this tensor's values, off any tape, no gradient."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"


class _Record:
    __slots__ = ("outputs", "inputs", "fn")

    def __init__(self, outputs: tuple, inputs: tuple, fn: Callable):
        self.outputs = outputs
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of one forward pass's differentiable operations.

    One tape per forward pass: record ops, call ``backward`` once, then
    ``reset`` before reuse. Pass ``record=False`` for gradient-free
    evaluation (the ops still run, nothing is stored).
    """

    _ids = itertools.count(1)

    def __init__(self, record: bool = True):
        self._id = next(Tape._ids)
        self._records: list[_Record] = []
        self._recording = record
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        """Drop all records and re-arm; tensors from before no longer belong here."""
        self._records.clear()
        self._consumed = False
        self._id = next(Tape._ids)

    # ------------------------------------------------------------------ #
    # plumbing

    def _wrap(self, data, inputs: tuple, fn: Callable) -> Tensor:
        if self._consumed:
            raise GraphError("tape already consumed; call reset() before recording new ops")
        tid = self._id
        requires = False
        for t in inputs:
            if t._tape_id is not None and t._tape_id != tid:
                raise GraphError("input tensor was produced on a different tape")
            if t.requires_grad:
                requires = True
        # op outputs are always float ndarrays; skip Tensor.__init__ checks
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = requires
        out.grad = None
        out.name = None
        out._tape_id = tid
        if requires and self._recording:
            self._records.append(_Record((out,), inputs, fn))
        return out

    def _wrap_multi(self, datas: Sequence, inputs: tuple, fn: Callable) -> tuple:
        if self._consumed:
            raise GraphError("tape already consumed; call reset() before recording new ops")
        tid = self._id
        requires = False
        for t in inputs:
            if t._tape_id is not None and t._tape_id != tid:
                raise GraphError("input tensor was produced on a different tape")
            if t.requires_grad:
                requires = True
        outs = []
        for data in datas:
            out = Tensor.__new__(Tensor)
            out.data = data
            out.requires_grad = requires
            out.grad = None
            out.name = None
            out._tape_id = tid
            outs.append(out)
        outs = tuple(outs)
        if requires and self._recording:
            self._records.append(_Record(outs, inputs, fn))
        return outs

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every recorded tensor reachable from loss.

        The records are walked exactly once, newest first; the tape is
        consumed afterwards. Frozen tensors (requires_grad False) are skipped,
        their .grad stays None.
        """
        if not self._recording:
            raise GraphError("backward on a non-recording tape")
        if self._consumed:
            raise GraphError("tape already consumed; gradients were already computed")
        if loss._tape_id != self._id:
            raise GraphError("loss tensor was not produced on this tape")
        if loss.data.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for rec in reversed(self._records):
            outs = rec.outputs
            if len(outs) == 1:
                g = outs[0].grad
                if g is None:
                    continue
                gins = rec.fn(g)
            else:
                if all(o.grad is None for o in outs):
                    continue
                gouts = tuple(
                    o.grad if o.grad is not None else np.zeros_like(o.data) for o in outs
                )
                gins = rec.fn(*gouts)
            for t, g in zip(rec.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
        self._records.clear()
        self._consumed = True

    # ------------------------------------------------------------------ #
    # linear algebra

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Matrix product of 2-D tensors, [m x k] @ [k x n] -> [m x n]."""
        ad, bd = a.data, b.data
        if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul expects [m x k] @ [k x n], got {ad.shape} and {bd.shape}")
        need_a, need_b = a.requires_grad, b.requires_grad

        def fn(g):
            return (
                g @ bd.T if need_a else None,
                ad.T @ g if need_b else None,
            )

        return self._wrap(ad @ bd, (a, b), fn)

    def transpose(self, a: Tensor) -> Tensor:
        ad = a.data
        if ad.ndim != 2:
            raise ShapeError(f"transpose expects a 2-D tensor, got shape {ad.shape}")

        def fn(g):
            return (g.T,)

        return self._wrap(ad.T.copy(), (a,), fn)

    # ------------------------------------------------------------------ #
    # elementwise arithmetic

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape != bd.shape:
            raise ShapeError(f"add expects equal shapes, got {ad.shape} and {bd.shape}")

        def fn(g):
            return (g, g)

        return self._wrap(ad + bd, (a, b), fn)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape != bd.shape:
            raise ShapeError(f"sub expects equal shapes, got {ad.shape} and {bd.shape}")

        def fn(g):
            return (g, -g)

        return self._wrap(ad - bd, (a, b), fn)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape != bd.shape:
            raise ShapeError(f"mul expects equal shapes, got {ad.shape} and {bd.shape}")

        def fn(g):
            return (g * bd, g * ad)

        return self._wrap(ad * bd, (a, b), fn)

    def add_bias(self, a: Tensor, bias: Tensor) -> Tensor:
        """Add a 1-D bias over the last axis of a 2-D tensor.

        This is the only broadcasting the engine performs.
        """
        ad, bd = a.data, bias.data
        if ad.ndim != 2 or bd.ndim != 1 or ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"add_bias expects [n x d] + [d], got {ad.shape} and {bd.shape}")

        def fn(g):
            return (g, g.sum(axis=0))

        return self._wrap(ad + bd, (a, bias), fn)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def fn(g):
            return (g * c,)

        return self._wrap(a.data * c, (a,), fn)

    def add_const(self, a: Tensor, c: float) -> Tensor:
        def fn(g):
            return (g,)

        return self._wrap(a.data + float(c), (a,), fn)

    # ------------------------------------------------------------------ #
    # normalization and nonlinearities

    def softmax_lastdim(self, a: Tensor) -> Tensor:
        """Stable softmax over the last axis; every slice sums to 1."""
        ad = a.data
        if ad.ndim == 0 or ad.shape[-1] == 0:
            raise ShapeError(f"softmax needs a non-empty last axis, got shape {ad.shape}")
        m = ad.max(axis=-1, keepdims=True)
        e = np.exp(ad - m)
        y = e / e.sum(axis=-1, keepdims=True)

        def fn(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        return self._wrap(y, (a,), fn)

    def log_softmax_lastdim(self, a: Tensor) -> Tensor:
        ad = a.data
        if ad.ndim == 0 or ad.shape[-1] == 0:
            raise ShapeError(f"log_softmax needs a non-empty last axis, got shape {ad.shape}")
        m = ad.max(axis=-1, keepdims=True)
        shifted = ad - m
        y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

        def fn(g):
            return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

        return self._wrap(y, (a,), fn)

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalize each last-axis slice to zero mean / unit variance, then scale and shift."""
        xd, gd, bd = x.data, gamma.data, beta.data
        if xd.ndim == 0 or xd.shape[-1] == 0:
            raise ShapeError(f"layer_norm needs a non-empty last axis, got shape {xd.shape}")
        d = xd.shape[-1]
        if gd.shape != (d,) or bd.shape != (d,):
            raise ShapeError(
                f"layer_norm affine shapes must be ({d},), got gamma {gd.shape} and beta {bd.shape}"
            )
        if eps < 0:
            raise ValueError(f"layer_norm eps must be >= 0, got {eps}")
        mean = xd.mean(axis=-1, keepdims=True)
        var = xd.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean) * inv

        def fn(g):
            flat_g = g.reshape(-1, d)
            flat_xhat = xhat.reshape(-1, d)
            dgamma = (flat_g * flat_xhat).sum(axis=0)
            dbeta = flat_g.sum(axis=0)
            dxhat = g * gd
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            return (dx, dgamma, dbeta)

        return self._wrap(xhat * gd + bd, (x, gamma, beta), fn)

    def activation(self, x: Tensor, kind: str) -> Tensor:
        """Elementwise gelu (exact erf form), sigmoid, or tanh."""
        xd = x.data
        if kind == "gelu":
            cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
            y = xd * cdf

            def fn(g):
                pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
                return (g * (cdf + xd * pdf),)

        elif kind == "sigmoid":
            # exp of -|x| only: no overflow on large inputs
            e = np.exp(-np.abs(xd))
            y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

            def fn(g):
                return (g * y * (1.0 - y),)

        elif kind == "tanh":
            y = np.tanh(xd)

            def fn(g):
                return (g * (1.0 - y * y),)

        else:
            raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")
        return self._wrap(y, (x,), fn)

    def gelu(self, x: Tensor) -> Tensor:
        return self.activation(x, "gelu")

    def sigmoid(self, x: Tensor) -> Tensor:
        return self.activation(x, "sigmoid")

    def tanh(self, x: Tensor) -> Tensor:
        return self.activation(x, "tanh")

    # ------------------------------------------------------------------ #
    # reductions

    def sum_all(self, a: Tensor) -> Tensor:
        ad = a.data

        def fn(g):
            return (g,)  # scalar broadcasts over the input shape

        return self._wrap(np.asarray(ad.sum()), (a,), fn)

    def mean_rows(self, a: Tensor) -> Tensor:
        """Mean over the rows of [n x d], yielding a 1-D tensor of width d."""
        ad = a.data
        if ad.ndim != 2 or ad.shape[0] == 0:
            raise ShapeError(f"mean_rows expects a non-empty 2-D tensor, got shape {ad.shape}")
        inv = 1.0 / ad.shape[0]

        def fn(g):
            return ((g * inv)[None, :],)  # broadcasts over rows on accumulation

        return self._wrap(ad.mean(axis=0), (a,), fn)

    # ------------------------------------------------------------------ #
    # structure: slicing, stacking, reshaping

    def reshape(self, a: Tensor, shape: tuple) -> Tensor:
        ad = a.data
        try:
            out = ad.reshape(shape).copy()
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {ad.shape} to {shape}: {exc}") from exc

        def fn(g):
            return (g.reshape(ad.shape),)

        return self._wrap(out, (a,), fn)

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        ad = a.data
        if ad.ndim != 2 or not 0 <= start < stop <= ad.shape[0]:
            raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {ad.shape}")

        def fn(g):
            z = np.zeros_like(ad)
            z[start:stop] = g
            return (z,)

        return self._wrap(ad[start:stop].copy(), (a,), fn)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        ad = a.data
        if ad.ndim != 2 or not 0 <= start < stop <= ad.shape[1]:
            raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {ad.shape}")

        def fn(g):
            z = np.zeros_like(ad)
            z[:, start:stop] = g
            return (z,)

        return self._wrap(ad[:, start:stop].copy(), (a,), fn)

    def split_rows(self, a: Tensor) -> tuple:
        """Split [n x d] into n tensors of shape [1 x d] with one shared record."""
        ad = a.data
        if ad.ndim != 2 or ad.shape[0] == 0:
            raise ShapeError(f"split_rows expects a non-empty 2-D tensor, got shape {ad.shape}")
        n = ad.shape[0]

        def fn(*gs):
            return (np.concatenate(gs, axis=0),)

        return self._wrap_multi([ad[i : i + 1].copy() for i in range(n)], (a,), fn)

    def stack_rows(self, rows: Sequence[Tensor]) -> Tensor:
        """Concatenate [1 x d] tensors into [n x d]."""
        if not rows:
            raise ShapeError("stack_rows needs at least one row")
        d = rows[0].data.shape
        for r in rows:
            if r.data.ndim != 2 or r.data.shape[0] != 1 or r.data.shape != d:
                raise ShapeError(f"stack_rows expects [1 x d] rows, got shapes {[t.shape for t in rows]}")
        n = len(rows)

        def fn(g):
            return tuple(g[i : i + 1] for i in range(n))

        return self._wrap(np.concatenate([r.data for r in rows], axis=0), tuple(rows), fn)

    def concat_rows(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[1]:
            raise ShapeError(f"concat_rows expects matching widths, got {ad.shape} and {bd.shape}")
        na = ad.shape[0]

        def fn(g):
            return (g[:na], g[na:])

        return self._wrap(np.concatenate([ad, bd], axis=0), (a, b), fn)

    def concat_cols(self, *tensors: Tensor) -> Tensor:
        if len(tensors) < 2:
            raise ShapeError("concat_cols needs at least two tensors")
        rows = tensors[0].data.shape[0] if tensors[0].data.ndim == 2 else -1
        for t in tensors:
            if t.data.ndim != 2 or t.data.shape[0] != rows:
                raise ShapeError(
                    f"concat_cols expects 2-D tensors with equal row counts, got {[t.shape for t in tensors]}"
                )
        widths = [t.data.shape[1] for t in tensors]
        offsets = np.cumsum([0] + widths)

        def fn(g):
            return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(widths)))

        return self._wrap(np.concatenate([t.data for t in tensors], axis=1), tensors, fn)

    def gather_rows(self, a: Tensor, indices) -> Tensor:
        """Pick a[i, indices[i]] for each row i of a 2-D tensor."""
        ad = a.data
        idx = np.asarray(indices)
        if ad.ndim != 2 or idx.ndim != 1 or idx.shape[0] != ad.shape[0]:
            raise ShapeError(f"gather_rows expects [n x d] with n indices, got {ad.shape} and {idx.shape}")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ShapeError(f"gather_rows indices must be integers, got dtype {idx.dtype}")
        rows = np.arange(ad.shape[0])

        def fn(g):
            z = np.zeros_like(ad)
            z[rows, idx] = g
            return (z,)

        return self._wrap(ad[rows, idx].copy(), (a,), fn)


def backward(loss: Tensor, tape: Tape) -> None:
    """Run reverse-mode differentiation for a scalar loss recorded on tape."""
    tape.backward(loss)


def linear(tape: Tape, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: [n x in] with weight [out x in] and bias [out]."""
    return tape.add_bias(tape.matmul(x, tape.transpose(weight)), bias)
