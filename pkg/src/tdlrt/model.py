"""Small differentiable layer stack with analytic gradients.

Layers are functional: ``forward`` returns ``(out, cache)`` and ``backward``
consumes that cache, so one layer object can serve several batches at once.
Tucker-factorized layers report the gradient with respect to the full dense
weight; :func:`factor_gradients` contracts it onto the core and factors.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .linalg import qr_orthonormal
from .tensor import fold, multi_mode_multiply, unfold
from .tucker import TuckerTensor


# -- factor gradients ---------------------------------------------------------


@dataclass(frozen=True)
class FactorGradients:
    grad_core: np.ndarray
    grad_factors: tuple


def _partial_projection(grad_w: np.ndarray, weight: TuckerTensor, skip: int) -> np.ndarray:
    factors = [None if j == skip else u for j, u in enumerate(weight.factors)]
    return multi_mode_multiply(grad_w, factors, transpose=True)


def factor_gradients(grad_w, weight: TuckerTensor) -> FactorGradients:
    """Chain rule from ``∇_W L`` to ``∇_C L`` and every ``∇_{U_i} L``.

    ``∇_C = ∇_W ×_i U_iᵀ`` and
    ``∇_{U_i} = Mat_i(∇_W ×_{j≠i} U_jᵀ) Mat_i(C)ᵀ``. Neither formula assumes
    orthonormal factors.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != weight.shape:
        raise ValueError(f"gradient shape {grad_w.shape} != weight shape {weight.shape}")
    grad_core = multi_mode_multiply(grad_w, weight.factors, transpose=True)
    grads = []
    for i in range(weight.ndim):
        partial = _partial_projection(grad_w, weight, i)
        grads.append(unfold(partial, i) @ unfold(weight.core, i).T)
    return FactorGradients(grad_core, tuple(grads))


def core_qr(core, mode: int):
    """``Mat_i(C)ᵀ = Q S_iᵀ``; returns ``(Q, S)`` with ``S`` of shape ``r_i × k``.

    ``k = r_i`` whenever ``Mat_i(C)`` has at least as many columns as rows,
    which holds for any core of full multilinear rank.
    """
    mt = unfold(core, mode).T
    if mt.shape[0] >= mt.shape[1]:
        q, r = qr_orthonormal(mt)
    else:
        q, r = np.linalg.qr(mt)
    return q, r.T


def k_gradient(grad_w, weight: TuckerTensor, mode: int, q: Optional[np.ndarray] = None) -> np.ndarray:
    """``∇_{K_i} L = Mat_i(∇_W) V_i`` with ``V_iᵀ = Q_iᵀ ⊗_{j≠i} U_jᵀ``."""
    if q is None:
        q, _ = core_qr(weight.core, mode)
    return unfold(_partial_projection(np.asarray(grad_w, dtype=np.float64), weight, mode), mode) @ q


def k_parametrization(weight: TuckerTensor, mode: int):
    """``(K_i, Ten_i(Q_iᵀ))`` such that ``Ten_i(Q_iᵀ) ×_{j≠i} U_j ×_i K_i = W``."""
    q, s = core_qr(weight.core, mode)
    shape = list(weight.ranks)
    shape[mode] = q.shape[1]
    return weight.factors[mode] @ s, fold(q.T, mode, shape)


def k_reconstruct(weight: TuckerTensor, mode: int, k: np.ndarray, ten_q: np.ndarray) -> np.ndarray:
    factors = list(weight.factors)
    factors[mode] = k
    return multi_mode_multiply(ten_q, factors)


# -- losses -------------------------------------------------------------------


def loss_mse(pred, target):
    """Mean over the batch of ``½‖pred − target‖²``; returns ``(value, ∂/∂pred)``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 0 or pred.shape[0] == 0:
        raise ValueError("empty batch")
    b = pred.shape[0]
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)) / b, diff / b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_ce(logits, labels):
    """Mean softmax cross-entropy for integer labels; returns ``(value, ∂/∂logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not match")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    value = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return value, grad / b


class QuadraticTensorLoss:
    """``L(W) = ½‖W − W*‖²`` with gradient ``W − W*``."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def value(self, w) -> float:
        diff = np.asarray(w) - self.target
        return 0.5 * float(np.sum(diff * diff))

    def grad(self, w) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) - self.target

    def euler_step(self, w, lr: float) -> np.ndarray:
        return (1.0 - lr) * np.asarray(w, dtype=np.float64) + lr * self.target

    def exact_flow(self, w0, t: float) -> np.ndarray:
        return self.target + np.exp(-t) * (np.asarray(w0, dtype=np.float64) - self.target)


def quadratic_tensor_loss(target) -> QuadraticTensorLoss:
    return QuadraticTensorLoss(target)


# -- convolution kernels ------------------------------------------------------


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0):
    """Patches of ``x`` (B, C, H, W) as rows of a ``(B·OH·OW, C·kh·kw)`` matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than the padded input")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return cols, oh, ow


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, oh: int, ow: int, stride: int = 1, padding: int = 0):
    b, c, h, w = x_shape
    d = dcols.reshape(b, oh, ow, c, kh, kw)
    dx = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for a in range(kh):
        for e in range(kw):
            dx[:, :, a : a + stride * oh : stride, e : e + stride * ow : stride] += d[:, :, :, :, a, e].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    f, c, kh, kw = kernel.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"input {x.shape} does not match kernel {kernel.shape}")
    cols, oh, ow = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(f, -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, oh, ow)


def conv2d_backward(dout, cache, kernel, stride=1, padding=0):
    x_shape, cols, oh, ow = cache
    f, c, kh, kw = kernel.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    grad_k = (dmat.T @ cols).reshape(kernel.shape)
    grad_b = dmat.sum(axis=0)
    dx = col2im(dmat @ kernel.reshape(f, -1), x_shape, kh, kw, oh, ow, stride, padding)
    return grad_k, grad_b, dx


# -- layers -------------------------------------------------------------------


class FactorizedLayer:
    """A layer whose weight is a :class:`TuckerTensor`."""

    kind = "abstract"

    def __init__(self, weight: TuckerTensor, bias=None):
        self.weight = weight
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)

    def parameters(self) -> dict:
        return {} if self.bias is None else {"bias": self.bias}


class FactorizedLinear(FactorizedLayer):
    """``y = U_1 C U_2ᵀ x + b`` applied factor by factor; weight is ``n_out × n_in``."""

    kind = "linear"

    def __init__(self, weight: TuckerTensor, bias=None):
        if weight.ndim != 2:
            raise ValueError("a factorized linear layer needs a 2-mode weight")
        super().__init__(weight, bias)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        u1, u2 = self.weight.factors
        if x.ndim != 2 or x.shape[1] != u2.shape[0]:
            raise ValueError(f"input {x.shape} does not match n_in={u2.shape[0]}")
        y = ((x @ u2) @ self.weight.core.T) @ u1.T
        if self.bias is not None:
            y = y + self.bias
        return y, x

    def backward(self, dy, cache):
        x = cache
        u1, u2 = self.weight.factors
        grads = {"weight": dy.T @ x}
        if self.bias is not None:
            grads["bias"] = dy.sum(axis=0)
        dx = ((dy @ u1) @ self.weight.core) @ u2.T
        return grads, dx


class FactorizedConv2d(FactorizedLayer):
    """Cross-correlation with a Tucker kernel of layout ``F × C × kh × kw``."""

    kind = "conv2d"

    def __init__(self, weight: TuckerTensor, bias=None, stride: int = 1, padding: int = 0):
        if weight.ndim != 4:
            raise ValueError("a factorized conv layer needs a 4-mode kernel")
        super().__init__(weight, bias)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        kernel = self.weight.reconstruct()
        out, cache = conv2d_forward(np.asarray(x, dtype=np.float64), kernel, self.bias, self.stride, self.padding)
        return out, (cache, kernel)

    def backward(self, dout, cache):
        conv_cache, kernel = cache
        grad_k, grad_b, dx = conv2d_backward(dout, conv_cache, kernel, self.stride, self.padding)
        grads = {"weight": grad_k}
        if self.bias is not None:
            grads["bias"] = grad_b
        return grads, dx


class DenseLinear:
    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)

    def parameters(self) -> dict:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def forward(self, x):
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y, x

    def backward(self, dy, cache):
        grads = {"weight": dy.T @ cache}
        if self.bias is not None:
            grads["bias"] = dy.sum(axis=0)
        return grads, dy @ self.weight


class ReLU:
    def parameters(self) -> dict:
        return {}

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return {}, dy * cache


class MaxPool2d:
    """Non-overlapping ``k × k`` max pooling; spatial sizes must divide by ``k``."""

    def __init__(self, k: int = 2):
        self.k = k

    def parameters(self) -> dict:
        return {}

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"spatial size {(h, w)} not divisible by {k}")
        blocks = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // k, w // k, k * k)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dy, cache):
        (b, c, h, w), idx = cache
        k = self.k
        blocks = np.zeros((b, c, h // k, w // k, k * k))
        np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
        dx = blocks.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return {}, dx


class Flatten:
    def parameters(self) -> dict:
        return {}

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return {}, dy.reshape(cache)


def forward(layer, inputs):
    return layer.forward(np.asarray(inputs, dtype=np.float64))[0]


def full_weight_gradient(layer: FactorizedLayer, inputs, targets, loss: Callable = loss_mse):
    """Loss, dense ``∇_W`` and input gradient of a single layer under ``loss``."""
    out, cache = layer.forward(np.asarray(inputs, dtype=np.float64))
    value, dout = loss(out, targets)
    grads, dx = layer.backward(dout, cache)
    return value, grads["weight"], dx


# -- network ------------------------------------------------------------------


class Network:
    """A sequential stack; ``loss_and_grads`` runs one forward/backward tape."""

    def __init__(self, layers: Sequence, loss: Callable = loss_softmax_ce):
        self.layers = list(layers)
        self.loss = loss

    @property
    def factorized(self) -> List[FactorizedLayer]:
        return [layer for layer in self.layers if isinstance(layer, FactorizedLayer)]

    def forward(self, x):
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def predict(self, x, batch_size: int = 1000) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def _tape(self, x, y):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        value, dout = self.loss(x, y)
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            grads[k], dout = self.layers[k].backward(dout, caches[k])
        return value, grads

    def loss_and_grads(self, x, y, threads: int = 1):
        """Loss and per-layer gradient dicts for one batch.

        With ``threads > 1`` the batch is split into fixed contiguous chunks
        evaluated concurrently; the chunk results are reduced in chunk order.
        """
        if threads <= 1 or len(x) < 2 * threads:
            return self._tape(x, y)
        bounds = np.linspace(0, len(x), threads + 1).astype(int)
        chunks = [(x[a:b], y[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: self._tape(*c), chunks))
        total = len(x)
        value = 0.0
        grads = [None] * len(self.layers)
        for (xc, _), (v, g) in zip(chunks, results):
            w = len(xc) / total
            value += w * v
            for k, gk in enumerate(g):
                if grads[k] is None:
                    grads[k] = {name: w * arr for name, arr in gk.items()}
                else:
                    for name, arr in gk.items():
                        grads[k][name] = grads[k][name] + w * arr
        return value, grads
