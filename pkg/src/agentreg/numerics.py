"""Dense-array numerics used by every other module.

Arrays are plain float64/complex128 numpy ndarrays. The 2D Fourier pair is
evaluated through explicit DFT matrices rather than an FFT; at the image
sizes this library targets (at most a few thousand pixels) the O(N^2) cost
is irrelevant and the code stays a line-by-line transcription of the
defining sums. Gradient-bearing operations ship an analytic backward pass
that is validated against `finite_diff_gradient` in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericalError
from .rng import Rng


def _as2d(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.size == 0:
        raise DimensionError(f"expected a nonempty 2D array, got shape {x.shape}")
    return x


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def dft2(x) -> np.ndarray:
    """Forward 2D DFT: F[u,v] = sum_{i,j} x[i,j] exp(-2i*pi*(ui/H + vj/W)).

    Accepts a real or complex H x W array and returns complex128.
    """
    x = _as2d(x).astype(np.complex128)
    h, w = x.shape
    return _dft_matrix(h, -1.0) @ x @ _dft_matrix(w, -1.0)


def idft2(f) -> np.ndarray:
    """Inverse 2D DFT with 1/(HW) normalization, so idft2(dft2(x)) == x."""
    f = _as2d(f).astype(np.complex128)
    h, w = f.shape
    return (_dft_matrix(h, 1.0) @ f @ _dft_matrix(w, 1.0)) / (h * w)


def softmax(v, axis: int = -1) -> np.ndarray:
    """Stabilized softmax; each slice along `axis` sums to 1."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(s: np.ndarray, ds: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output `s` and upstream `ds`."""
    inner = np.sum(s * ds, axis=axis, keepdims=True)
    return s * (ds - inner)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def cosine_similarity(a, b) -> float:
    """cos(a, b) for two vectors; raises DegenerateInputError on zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, dout: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, dout, slope * dout)


# --- three-layer 3x3 convolution stack -------------------------------------

_OFFSETS = [(a, b) for a in range(3) for b in range(3)]


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (3, 3, c_in, c_out)
    bias: np.ndarray    # (c_out,)


@dataclass
class ConvStackWeights:
    """Three 3x3 convolution layers with a pointwise nonlinearity between them.

    `negative_slope` selects the leaky-rectifier slope applied after layers
    1 and 2 (the final layer output is linear); slope 1.0 makes the whole
    stack linear.
    """

    layers: list[ConvLayer] = field(default_factory=list)
    negative_slope: float = 0.01

    def channel_spec(self) -> list[int]:
        spec = [self.layers[0].kernel.shape[2]]
        spec += [layer.kernel.shape[3] for layer in self.layers]
        return spec


def init_conv_stack(channels: tuple[int, int, int, int], rng: Rng,
                    scale: float = 0.1, negative_slope: float = 0.01) -> ConvStackWeights:
    """Random stack mapping channels[0] -> channels[3] through two hidden widths."""
    if len(channels) != 4:
        raise DimensionError("conv stack needs 4 channel counts (in, h1, h2, out)")
    layers = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        kernel = rng.normal(0.0, scale, (3, 3, cin, cout))
        layers.append(ConvLayer(kernel=kernel, bias=np.zeros(cout)))
    return ConvStackWeights(layers=layers, negative_slope=negative_slope)


def zero_conv_stack(channels: tuple[int, int, int, int],
                    negative_slope: float = 0.01) -> ConvStackWeights:
    layers = [ConvLayer(kernel=np.zeros((3, 3, cin, cout)), bias=np.zeros(cout))
              for cin, cout in zip(channels[:-1], channels[1:])]
    return ConvStackWeights(layers=layers, negative_slope=negative_slope)


def _conv2d_same(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    h, w, cin = x.shape
    cout = layer.kernel.shape[3]
    xp = np.zeros((h + 2, w + 2, cin))
    xp[1:-1, 1:-1] = x
    out = np.tile(layer.bias, (h, w, 1))
    for a, b in _OFFSETS:
        patch = xp[a:a + h, b:b + w].reshape(h * w, cin)
        out += (patch @ layer.kernel[a, b]).reshape(h, w, cout)
    return out


def _conv2d_same_backward(x: np.ndarray, layer: ConvLayer, dout: np.ndarray):
    h, w, cin = x.shape
    cout = dout.shape[2]
    xp = np.zeros((h + 2, w + 2, cin))
    xp[1:-1, 1:-1] = x
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(layer.kernel)
    dflat = dout.reshape(h * w, cout)
    for a, b in _OFFSETS:
        patch = xp[a:a + h, b:b + w].reshape(h * w, cin)
        dk[a, b] = patch.T @ dflat
        dxp[a:a + h, b:b + w] += (dflat @ layer.kernel[a, b].T).reshape(h, w, cin)
    db = dflat.sum(axis=0)
    return dxp[1:-1, 1:-1], dk, db


def conv_stack_forward(x, weights: ConvStackWeights) -> np.ndarray:
    """Apply the 3-layer stack; spatial dims are preserved (zero padding)."""
    out, _ = conv_stack_forward_cached(x, weights)
    return out


def conv_stack_forward_cached(x, weights: ConvStackWeights):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"conv stack input must be H x W x C, got {x.shape}")
    if x.shape[2] != weights.layers[0].kernel.shape[2]:
        raise DimensionError(
            f"input has {x.shape[2]} channels, stack expects "
            f"{weights.layers[0].kernel.shape[2]}")
    cache = {"inputs": [], "pre": []}
    cur = x
    last = len(weights.layers) - 1
    for i, layer in enumerate(weights.layers):
        cache["inputs"].append(cur)
        pre = _conv2d_same(cur, layer)
        cache["pre"].append(pre)
        cur = pre if i == last else leaky_relu(pre, weights.negative_slope)
    return cur, cache


def conv_stack_backward(weights: ConvStackWeights, cache: dict, dout: np.ndarray):
    """Gradients of a scalar loss w.r.t. every kernel/bias and the input."""
    grads = []
    cur = np.asarray(dout, dtype=np.float64)
    last = len(weights.layers) - 1
    for i in range(last, -1, -1):
        if i != last:
            cur = leaky_relu_backward(cache["pre"][i], cur, weights.negative_slope)
        dx, dk, db = _conv2d_same_backward(cache["inputs"][i], weights.layers[i], cur)
        grads.append((dk, db))
        cur = dx
    grads.reverse()
    return grads, cur


def finite_diff_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    This harness is the reference every hand-written backward pass in the
    package is checked against; it must stay independent of those passes.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Max-norm relative discrepancy used by all gradient checks."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(float(np.max(np.abs(reference))), 1e-8)
    return float(np.max(np.abs(analytic - reference))) / denom
