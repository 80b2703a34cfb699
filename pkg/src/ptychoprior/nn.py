"""Differentiable building blocks, optimizers, layer freezing and checkpoints.

Tensors are ``torch.Tensor`` and the tape is torch's autograd graph.  The op
set is deliberately small: 3x3/stride-1/pad-1 convolutions plus explicit x2
up- and down-sampling.  The complex physics chain is carried as paired
real/imaginary tensors through :func:`fft2_pair`, whose backward rule is the
adjoint transform written out by hand.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import DimensionError, decode_array, encode_array, fft2, ifft2

LEAKY_SLOPE = 0.2


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def matmul(a, b):
    if a.shape[-1] != b.shape[0] or b.dim() != 2:
        raise DimensionError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def conv2d(x, weight, bias=None):
    """3x3 convolution, stride 1, zero padding 1.  ``x`` is (B, C, H, W)."""
    if weight.shape[-2:] != (3, 3) or x.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: shape mismatch {tuple(x.shape)} vs {tuple(weight.shape)}")
    return F.conv2d(x, weight, bias, stride=1, padding=1)


def upsample_nearest(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def avgpool(x):
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise DimensionError(f"avgpool: odd spatial shape {tuple(x.shape)}")
    return F.avg_pool2d(x, 2)


def leaky_relu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def sigmoid(x):
    return torch.sigmoid(x)


def sum(x):  # noqa: A001 - op name
    return x.sum()


def mean(x):
    return x.mean()


def abs(x):  # noqa: A001
    return x.abs()


def log(x):
    return torch.log(x)


def square(x):
    return x * x


def scale(x, c: float):
    return x * c


class _Fft2Pair(torch.autograd.Function):
    """Orthonormal 2D DFT on (re, im) pairs over the last two axes.

    For real-valued losses the gradient w.r.t. the input pair is the adjoint
    (= inverse, for an orthonormal transform) applied to the output gradient
    pair, read as one complex array.
    """

    @staticmethod
    def forward(ctx, re, im):
        z = fft2(re.detach().numpy() + 1j * im.detach().numpy())
        return (
            torch.from_numpy(np.ascontiguousarray(z.real)).to(re.dtype),
            torch.from_numpy(np.ascontiguousarray(z.imag)).to(re.dtype),
        )

    @staticmethod
    def backward(ctx, g_re, g_im):
        g = ifft2(g_re.numpy() + 1j * g_im.numpy())
        return (
            torch.from_numpy(np.ascontiguousarray(g.real)).to(g_re.dtype),
            torch.from_numpy(np.ascontiguousarray(g.imag)).to(g_re.dtype),
        )


def fft2_pair(re, im):
    _same_shape(re, im, "fft2_pair")
    return _Fft2Pair.apply(re, im)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


# ---------------------------------------------------------------------------
# Layered networks and freezing
# ---------------------------------------------------------------------------


class LayeredNet(torch.nn.Module):
    """Module whose trainable parameters are grouped into an ordered layer list."""

    layers: torch.nn.ModuleList

    def layer_params(self, index: int) -> list[torch.nn.Parameter]:
        if not 0 <= index < len(self.layers):
            raise IndexError(f"layer index {index} out of range 0..{len(self.layers) - 1}")
        return list(self.layers[index].parameters())

    @property
    def layer_count(self) -> int:
        return len(self.layers)


def freeze(net: LayeredNet, indices) -> None:
    for i in indices:
        for p in net.layer_params(i):
            p.requires_grad_(False)
            p.grad = None


def unfreeze(net: LayeredNet, indices, opt: "Optimizer | None" = None) -> None:
    """Re-enable training; the optimizer (if given) restarts those moments at zero."""
    for i in indices:
        params = net.layer_params(i)
        for p in params:
            p.requires_grad_(True)
        if opt is not None:
            opt.reset(params)


def frozen_layers(net: LayeredNet) -> list[int]:
    return [i for i in range(net.layer_count) if not any(p.requires_grad for p in net.layer_params(i))]


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    """Plain SGD or bias-corrected Adam over an explicit parameter list.

    Parameters with ``requires_grad`` off are skipped and their moment buffers
    are left alone.  Moments and the Adam step counter are kept per parameter,
    so a layer that starts training late gets its own bias correction.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, kind: str = "adam", lr: float = 1e-3):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.state: dict[int, dict] = {}

    def reset(self, params=None) -> None:
        targets = self.params if params is None else params
        for p in targets:
            self.state.pop(id(p), None)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for p in self.params:
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise RuntimeError(f"parameter of shape {tuple(p.shape)} has no gradient")
            g = p.grad
            if self.kind == "sgd":
                p.sub_(self.lr * g)
                continue
            st = self.state.get(id(p))
            if st is None:
                st = {"t": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}
                self.state[id(p)] = st
            st["t"] += 1
            t = st["t"]
            st["m"].mul_(self.BETA1).add_(g, alpha=1 - self.BETA1)
            st["v"].mul_(self.BETA2).addcmul_(g, g, value=1 - self.BETA2)
            m_hat = st["m"] / (1 - self.BETA1**t)
            v_hat = st["v"] / (1 - self.BETA2**t)
            p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.EPS))


def step(opt: Optimizer, params=None) -> None:
    if params is not None and [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("optimizer was built over a different parameter list")
    opt.step()


# ---------------------------------------------------------------------------
# Named-tensor checkpoints
# ---------------------------------------------------------------------------


def save_tensors(path, named: dict[str, torch.Tensor]) -> None:
    """Write ``name -> tensor`` as repeated (u16 length, UTF-8 name, PTYF blob) records."""
    chunks = []
    for name, t in named.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + encode_array(t.detach().cpu().numpy()))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_tensors(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    out: dict[str, torch.Tensor] = {}
    pos = 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        arr, pos = decode_array(buf, pos + 2 + n)
        out[name] = torch.from_numpy(arr)
    return out
