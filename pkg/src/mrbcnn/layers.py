"""Convolution, pooling, fully-connected and dropout layers.

Image-like tensors are channels-first.  Every layer accepts either a single
sample ``C x H x W`` or a batch ``B x C x H x W`` and returns the same rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .rng import Stream
from .tensor import Tensor, as_tensor, relu, reshape  # noqa: F401  (relu re-exported)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (7, 7)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError(f"channel counts must be positive: {self}")
        if min(self.kernel) < 1:
            raise ContractError(f"kernel extents must be positive: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        if h < kh or w < kw:
            raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return h - kh + 1, w - kw + 1


def _as_batch(x: Tensor, what: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{what} expects C x H x W or B x C x H x W, got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Unfold ``B x C x H x W`` into ``B x (C*kh*kw) x (H'*W')`` patch columns."""
    b, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


# column buffers above this size are recomputed in backward instead of kept
_CACHE_LIMIT_BYTES = 64 * 2**20


def conv2d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec | None = None) -> Tensor:
    """Valid (unpadded, stride 1) cross-correlation plus per-channel bias."""
    w, b = as_tensor(w), as_tensor(b)
    if w.ndim != 4:
        raise DimensionError(f"conv weight must be 4-d, got {w.shape}")
    co, ci, kh, kw = w.shape
    if spec is not None and spec.weight_shape != w.shape:
        raise DimensionError(f"weight shape {w.shape} does not match {spec}")
    if b.shape != (co,):
        raise DimensionError(f"bias shape {b.shape} does not match {co} output channels")
    xb, squeeze = _as_batch(as_tensor(x), "conv2d")
    bsz, c, h, wd = xb.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels, weight {w.shape} expects {ci}")
    if h < kh or wd < kw:
        raise DimensionError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, wd - kw + 1
    xd, wm = xb.data, w.data.reshape(co, -1)
    cols = im2col(xd, kh, kw)
    out = (np.matmul(wm, cols) + b.data[:, None]).reshape(bsz, co, ho, wo)
    kept = cols if cols.nbytes <= _CACHE_LIMIT_BYTES else None
    need_dx = xb.requires_grad

    def back(g):
        gm = g.reshape(bsz, co, ho * wo)
        cc = kept if kept is not None else im2col(xd, kh, kw)
        dw = np.matmul(gm, cc.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        db = gm.sum(axis=(0, 2))
        dx = None
        if need_dx:
            dcols = np.matmul(wm.T, gm).reshape(bsz, c, kh, kw, ho, wo)
            dx = np.zeros(xd.shape)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, i, j]
        return dx, dw, db

    y = Tensor._from_op(out, (xb, w, b), back, "conv2d")
    return _unbatch(y, squeeze)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties inside a window resolve to the first position in row-major order,
    which is also where the gradient is routed.
    """
    xb, squeeze = _as_batch(as_tensor(x), "maxpool2")
    bsz, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2 needs at least 2x2 spatial extent, got {h}x{w}")
    ho, wo = h // 2, w // 2
    xc = xb.data[:, :, : 2 * ho, : 2 * wo]
    win = xc.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    shape = xb.shape

    def back(g):
        gw = np.zeros((bsz, c, ho, wo, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(shape)
        gx[:, :, : 2 * ho, : 2 * wo] = (
            gw.reshape(bsz, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, 2 * ho, 2 * wo)
        )
        return (gx,)

    y = Tensor._from_op(out, (xb,), back, "maxpool2")
    return _unbatch(y, squeeze)


def fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` for a vector ``x`` or each row of a batch."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise DimensionError(f"fc: weight {w.shape} and bias {b.shape} do not conform")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"fc: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def back(g):
        gx = g @ wd
        if g.ndim == 1:
            return gx, np.outer(g, xd), g
        return gx, g.T @ xd, g.sum(axis=0)

    return Tensor._from_op(out, (x, w, b), back, "fc")


def dropout(x: Tensor, p: float, stream: Stream | None, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if stream is None:
        raise ContractError("dropout in training mode needs a random stream")
    keep = (stream.gen.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def glorot_bound(shape: tuple[int, ...]) -> float:
    """``sqrt(6 / (fan_in + fan_out))`` for a conv (4-d) or fc (2-d) weight."""
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        raise DimensionError(f"no fan definition for weight of shape {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass
class ParamStore:
    """Named trainable tensors plus per-parameter momentum buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)
        self.momentum[name] = np.zeros(np.shape(value))

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def set(self, name: str, value: np.ndarray) -> None:
        old = self[name]
        if np.shape(value) != old.shape:
            raise DimensionError(f"{name}: new value {np.shape(value)} != {old.shape}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self.params.items()}


def init_weights(shapes: dict[str, tuple[int, ...]], stream: Stream) -> ParamStore:
    """Fan-balanced uniform weights, zero biases.

    Each parameter draws from its own child stream (named after the
    parameter), so the values do not depend on iteration order.
    """
    store = ParamStore()
    for name, shape in shapes.items():
        if name.endswith(".b"):
            store.add(name, np.zeros(shape))
        else:
            bound = glorot_bound(shape)
            store.add(name, stream.split(name).gen.uniform(-bound, bound, size=shape))
    return store
