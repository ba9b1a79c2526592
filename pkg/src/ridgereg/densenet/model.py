"""Siamese feature branches + U-shaped encoder/decoder regressing a dense
displacement field, with the regression + smoothness training loss.

Layout
------
branch   4 x (3x3 conv + ReLU), one weight set applied to both inputs
encoder  5 x (3x3 conv + ReLU), 2x max-pool after the first four
decoder  4 x (2x nearest upsample, concat encoder skip, 3x3 conv + ReLU)
head     1x1 conv to 2 channels (dx, dy), linear

Inputs are normalised to [-1, 1] with background pixels zeroed.  Side lengths
must be multiples of 16.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from ..core import DisplacementField, GrayImage
from . import layers as L

Params = Dict[str, np.ndarray]

DOWNSAMPLE = 16


@dataclass(frozen=True)
class NetSpec:
    branch: tuple = (4, 8, 8, 8)
    encoder: tuple = (16, 16, 32, 32, 64)
    decoder: tuple = (32, 32, 16, 16)

    def __post_init__(self):
        if len(self.branch) != 4 or len(self.encoder) != 5 or len(self.decoder) != 4:
            raise ValueError("need 4 branch, 5 encoder and 4 decoder widths")

    @classmethod
    def full(cls) -> "NetSpec":
        return cls((8, 16, 16, 16), (32, 32, 64, 64, 128), (64, 64, 32, 32))

    @classmethod
    def uniform(cls, width: int) -> "NetSpec":
        return cls((width,) * 4, (width,) * 5, (width,) * 4)

    def layer_shapes(self):
        """Ordered ``(name, k, c_in, c_out)`` for every convolution."""
        out = []
        c = 1
        for i, co in enumerate(self.branch):
            out.append((f"branch.{i}", 3, c, co))
            c = co
        c = 2 * self.branch[-1]
        for i, co in enumerate(self.encoder):
            out.append((f"enc.{i}", 3, c, co))
            c = co
        skips = list(self.encoder[:4])[::-1]
        for i, co in enumerate(self.decoder):
            out.append((f"dec.{i}", 3, c + skips[i], co))
            c = co
        out.append(("head", 1, c, 2))
        return out

    @classmethod
    def from_params(cls, params: Params) -> "NetSpec":
        def width(name):
            return params[f"{name}.b"].shape[0]

        return cls(
            tuple(width(f"branch.{i}") for i in range(4)),
            tuple(width(f"enc.{i}") for i in range(5)),
            tuple(width(f"dec.{i}") for i in range(4)),
        )


def param_names(spec: NetSpec) -> list[str]:
    names = []
    for name, *_ in spec.layer_shapes():
        names += [f"{name}.w", f"{name}.b"]
    return names


def init_params(spec: NetSpec = NetSpec(), seed: int = 0, dtype=np.float32) -> Params:
    """Fan-in scaled uniform weights (narrower for the head) and zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, k, ci, co in spec.layer_shapes():
        fan_in = k * k * ci
        bound = np.sqrt(6.0 / fan_in) if name != "head" else np.sqrt(1.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, co)).astype(dtype)
        params[f"{name}.b"] = np.zeros(co, dtype=dtype)
    return params


def normalise(image: GrayImage, dtype=np.float32) -> np.ndarray:
    x = image.pixels.astype(dtype) / dtype(127.5) - dtype(1.0)
    return np.where(image.mask, x, dtype(0.0)).astype(dtype)


def check_size(height: int, width: int) -> None:
    if height % DOWNSAMPLE or width % DOWNSAMPLE or height == 0 or width == 0:
        raise ValueError(f"input {width}x{height} must have sides divisible by {DOWNSAMPLE}")


def _run(params: Params, x1: np.ndarray, x2: np.ndarray):
    """Forward pass on NHWC batches; returns output and a backward closure."""
    check_size(x1.shape[1], x1.shape[2])
    if x1.shape != x2.shape:
        raise ValueError(f"input shapes differ: {x1.shape} vs {x2.shape}")
    spec = NetSpec.from_params(params)
    tape = []

    def conv_relu(h, name, k=3, act=True):
        out, cc = L.conv_forward(h, params[f"{name}.w"], params[f"{name}.b"], k)
        if not act:
            tape.append(("conv", name, cc))
            return out
        out, keep = L.relu_forward(out)
        tape.append(("conv_relu", name, (cc, keep)))
        return out

    feats = []
    for x in (x1, x2):
        h = x
        for i in range(4):
            h = conv_relu(h, f"branch.{i}")
        feats.append(h)
    split = feats[0].shape[-1]
    h = np.concatenate(feats, axis=-1)
    tape.append(("concat_branches", None, split))

    skips = []
    for i in range(5):
        h = conv_relu(h, f"enc.{i}")
        if i < 4:
            skips.append(h)
            h, pc = L.maxpool_forward(h)
            tape.append(("pool", i, pc))
    for i in range(4):
        h = L.upsample_forward(h)
        skip = skips[3 - i]
        tape.append(("up_concat", 3 - i, h.shape[-1]))
        h = np.concatenate([h, skip], axis=-1)
        h = conv_relu(h, f"dec.{i}")
    out = conv_relu(h, "head", k=1, act=False)
    return out, tape, spec


def _backward(params: Params, tape, dout):
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    skip_grads = {}
    g = dout
    branch_grads = None
    for kind, name, cache in reversed(tape):
        if kind in ("conv", "conv_relu"):
            if kind == "conv_relu":
                cc, keep = cache
                g = L.relu_backward(g, keep)
            else:
                cc = cache
            g, dw, db = L.conv_backward(g, cc)
            grads[f"{name}.w"] += dw
            grads[f"{name}.b"] += db
        elif kind == "up_concat":
            idx, c_up = name, cache
            skip_grads[idx] = g[..., c_up:]
            g = L.upsample_backward(g[..., :c_up])
        elif kind == "pool":
            g = L.maxpool_backward(g, cache)
            # the pooled tensor is also a skip source
            g = g + skip_grads.pop(name)
        elif kind == "concat_branches":
            split = cache
            branch_grads = [g[..., split:], g[..., :split]]
            g = branch_grads.pop(0)
        # the branch ops for input 2 come last in the tape; once they are
        # unwound, continue with the gradient of branch 1
        if kind == "conv_relu" and name == "branch.0" and branch_grads:
            g = branch_grads.pop(0)
    return grads


def forward_array(params: Params, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    out, _, _ = _run(params, x1, x2)
    return out


def forward(params: Params, i1: GrayImage, i2: GrayImage) -> DisplacementField:
    """Predict the field ``D`` with ``warp(i1, D)`` approximating ``i2``."""
    if i1.shape != i2.shape:
        raise ValueError(f"image shapes differ: {i1.shape} vs {i2.shape}")
    check_size(*i1.shape)
    dtype = params["head.w"].dtype.type
    x1 = normalise(i1, dtype)[None, ..., None]
    x2 = normalise(i2, dtype)[None, ..., None]
    out = forward_array(params, x1, x2)[0]
    return DisplacementField(out[..., 0], out[..., 1])


def loss_array(d_est: np.ndarray, d_gt: np.ndarray, lam: float):
    """Loss on ``(..., H, W, 2)`` arrays: ``(total, l_est, l_smo, grad)``.

    ``l_est`` sums squared endpoint errors; ``l_smo`` sums squared forward
    differences of ``d_est`` along x and y (last column / row omitted).
    """
    if d_est.shape != d_gt.shape:
        raise ValueError(f"field shapes differ: {d_est.shape} vs {d_gt.shape}")
    r = d_est - d_gt
    l_est = float(np.sum(r * r))
    gx = d_est[..., :, 1:, :] - d_est[..., :, :-1, :]
    gy = d_est[..., 1:, :, :] - d_est[..., :-1, :, :]
    l_smo = float(np.sum(gx * gx) + np.sum(gy * gy))
    grad = 2.0 * r
    gs = np.zeros_like(d_est)
    gs[..., :, 1:, :] += 2.0 * gx
    gs[..., :, :-1, :] -= 2.0 * gx
    gs[..., 1:, :, :] += 2.0 * gy
    gs[..., :-1, :, :] -= 2.0 * gy
    grad = grad + lam * gs
    return l_est + lam * l_smo, l_est, l_smo, grad.astype(d_est.dtype, copy=False)


def loss(d_est: DisplacementField, d_gt: DisplacementField, lam: float = 0.8):
    """``(total, l_est, l_smo)`` with ``total = l_est + lam * l_smo``."""
    if d_est.shape != d_gt.shape:
        raise ValueError(f"field shapes differ: {d_est.shape} vs {d_gt.shape}")
    a = np.stack([d_est.dx, d_est.dy], axis=-1)
    b = np.stack([d_gt.dx, d_gt.dy], axis=-1)
    total, l_est, l_smo, _ = loss_array(a, b, lam)
    return total, l_est, l_smo


def batch_arrays(samples: Sequence, dtype=np.float32):
    """Stack TrainSamples into ``(x1, x2, d)`` NHWC arrays."""
    x1 = np.stack([normalise(s.i1, dtype) for s in samples])[..., None]
    x2 = np.stack([normalise(s.i2, dtype) for s in samples])[..., None]
    d = np.stack([np.stack([s.d.dx, s.d.dy], axis=-1) for s in samples]).astype(dtype)
    return x1, x2, d


def gradients_array(params: Params, x1, x2, d, lam: float):
    out, tape, _ = _run(params, x1, x2)
    total, l_est, l_smo, dout = loss_array(out, d, lam)
    grads = _backward(params, tape, dout)
    return grads, total, l_est, l_smo


def gradients(params: Params, batch: Sequence, lam: float = 0.8):
    """Gradient of the batch-summed loss w.r.t. every parameter tensor.

    Returns ``(grads, total_loss)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    dtype = params["head.w"].dtype.type
    x1, x2, d = batch_arrays(batch, dtype)
    grads, total, _, _ = gradients_array(params, x1, x2, d, lam)
    return grads, total
