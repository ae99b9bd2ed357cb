"""Deterministic ndarray numerics shared by every model in the package.

numpy arrays are the tensor carrier throughout: row-major storage, float32
by default, float64 accumulation wherever a reduction feeds a tolerance
(norms, softmax, statistics).  The convolution pair ``conv2d_valid`` /
``conv2d_full`` is written to be an exact linear adjoint pair, which both
the Boltzmann-machine reconstruction and every backprop path rely on.

All functions are pure; ``RandomStream`` is the only stateful object and is
meant to be owned by a single caller.
"""

import numpy as np

from .errors import ConfigurationError, NumericError

__all__ = [
    "RandomStream",
    "ensure_finite",
    "conv2d_valid",
    "conv2d_valid_batch",
    "conv2d_full",
    "conv2d_full_batch",
    "conv2d_input_grad",
    "conv2d_kernel_grad",
    "sigmoid",
    "relu",
    "softmax",
    "finite_diff_grad",
]


def ensure_finite(name, arr):
    """Raise NumericError if `arr` contains NaN or Inf; return `arr`."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


# ---------------------------------------------------------------------------
# random streams


class RandomStream:
    """Seeded, counter-tracked random stream (Philox counter-based core).

    Two streams built from the same seed produce the same draw sequence on
    every platform.  `counter` records how many values have been drawn so a
    stream's position is inspectable.  Never share one stream between
    concurrent workers; derive one per worker with `child`.
    """

    def __init__(self, seed, counter=0):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        if counter:
            self.skip(counter)

    def skip(self, n):
        """Advance the stream by `n` draws."""
        self._gen.random(int(n))
        self.counter += int(n)

    def child(self, *tags):
        """Derive an independent stream from this stream's seed and `tags`."""
        mixed = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *map(int, tags)])
        return RandomStream(int(mixed.generate_state(1, np.uint64)[0]))

    def uniform(self, shape=()):
        """Uniform draws in [0, 1) as float64."""
        out = self._gen.random(shape)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        return out

    def normal(self, shape=(), scale=1.0):
        """Zero-mean Gaussian draws as float64."""
        out = self._gen.standard_normal(shape) * scale
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        return out

    def integers(self, low, high, shape=()):
        """Integer draws in [low, high)."""
        out = self._gen.integers(low, high, size=shape)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        return out

    def permutation(self, n):
        """A random permutation of range(n)."""
        out = self._gen.permutation(n)
        self.counter += int(n)
        return out


# ---------------------------------------------------------------------------
# convolution family
#
# "Convolution" everywhere means cross-correlation (no kernel flip); the
# full-mode operation below is the exact adjoint of the valid-mode one.


def _windows(x, extent, stride):
    """Strided (B, C, P, Q, k, k) view of all valid kxk windows."""
    win = np.lib.stride_tricks.sliding_window_view(x, (extent, extent), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def _check_conv_shapes(x, kernels):
    if x.ndim != 4 or kernels.ndim != 4:
        raise ConfigurationError(
            f"conv expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    _, c, h, w = x.shape
    _, kc, kh, kw = kernels.shape
    if kh != kw:
        raise ConfigurationError(f"kernels must be square, got {kh}x{kw}")
    if kc != c:
        raise ConfigurationError(
            f"kernel channels {kc} do not match input channels {c}")
    if kh > h or kw > w:
        raise ConfigurationError(
            f"kernel extent {kh} exceeds input extent {h}x{w}")


def conv2d_valid_batch(x, kernels, bias=None, stride=1):
    """Valid cross-correlation over a batch.

    x: (B, C, H, W); kernels: (G, C, k, k); bias: (G,) or None.
    Returns (B, G, (H-k)//stride+1, (W-k)//stride+1).
    """
    x = np.ascontiguousarray(x)
    _check_conv_shapes(x, kernels)
    b, c, _, _ = x.shape
    g, _, k, _ = kernels.shape
    win = _windows(x, k, stride)
    p, q = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * p * q, c * k * k)
    out = cols @ kernels.reshape(g, -1).T
    out = out.reshape(b, p, q, g).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias).reshape(1, g, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_valid(x, kernels, bias=None, stride=1):
    """Single-image form of `conv2d_valid_batch`: (C,H,W) -> (G,H',W')."""
    out = conv2d_valid_batch(x[None], kernels, bias=bias, stride=stride)[0]
    return ensure_finite("conv2d_valid output", out)


def conv2d_full_batch(y, kernels):
    """Adjoint of stride-1 `conv2d_valid_batch`.

    y: (B, G, h, w); kernels: (G, C, k, k).  Returns (B, C, h+k-1, w+k-1)
    such that <conv2d_valid(x, K), y> == <x, conv2d_full(y, K)>.
    """
    y = np.asarray(y)
    if y.ndim != 4 or kernels.ndim != 4:
        raise ConfigurationError(
            f"conv_full expects 4-d input and kernels, got {y.shape} and {kernels.shape}")
    if y.shape[1] != kernels.shape[0]:
        raise ConfigurationError(
            f"input groups {y.shape[1]} do not match kernel groups {kernels.shape[0]}")
    k = kernels.shape[2]
    pad = k - 1
    ypad = np.pad(y, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    flipped = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d_valid_batch(ypad, np.ascontiguousarray(flipped))


def conv2d_full(y, kernels):
    """Single-image form of `conv2d_full_batch`: (G,h,w) -> (C,h+k-1,w+k-1)."""
    out = conv2d_full_batch(y[None], kernels)[0]
    return ensure_finite("conv2d_full output", out)


def conv2d_input_grad(dy, kernels, stride, input_hw):
    """Gradient of a (possibly strided) valid correlation w.r.t. its input.

    dy: (B, G, P, Q) upstream gradient; returns (B, C, H, W) with
    (H, W) = input_hw.  Equals `conv2d_full_batch` when stride is 1 and the
    kernel tiles the input exactly.  Implemented as one contraction over
    groups followed by k^2 strided scatter-adds, so no dilated buffer is
    ever materialized.
    """
    b, g, p, q = dy.shape
    gk, c, k, _ = kernels.shape
    if gk != g:
        raise ConfigurationError(
            f"gradient groups {g} do not match kernel groups {gk}")
    h, w = input_hw
    # (B, P, Q, C, k, k) = dy contracted against the kernels over groups
    spread = np.tensordot(dy, kernels, axes=(1, 0))
    out = np.zeros((b, c, h, w), dtype=spread.dtype)
    for a in range(k):
        for bb in range(k):
            out[:, :, a:a + stride * (p - 1) + 1:stride,
                bb:bb + stride * (q - 1) + 1:stride] += spread[:, :, :, :, a, bb].transpose(
                    0, 3, 1, 2)
    return out


def conv2d_kernel_grad(x, dy, extent, stride=1):
    """Gradient of a valid correlation w.r.t. its kernels.

    x: (B, C, H, W) forward input; dy: (B, G, P, Q) upstream gradient.
    Returns (G, C, extent, extent), summed over the batch.
    """
    x = np.ascontiguousarray(x)
    b, c, _, _ = x.shape
    g, p, q = dy.shape[1], dy.shape[2], dy.shape[3]
    win = _windows(x, extent, stride)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * p * q, c * extent * extent)
    dyr = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * p * q, g)
    return (dyr.T @ cols).reshape(g, c, extent, extent)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(x):
    """Numerically stable logistic function, elementwise, in (0, 1)."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    """max(0, x) elementwise."""
    return np.maximum(x, 0)


def softmax(x, axis=-1):
    """Shift-stable softmax along `axis`, computed and returned in float64.

    Slices sum to 1 to within accumulation error (~1e-16 per element).
    """
    x = np.asarray(x, dtype=np.float64)
    ensure_finite("softmax input", x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f, x, step=1e-4):
    """Central-difference gradient of scalar-valued `f` at `x`, in float64.

    Perturbs one element at a time; O(2 * x.size) evaluations of `f`.  Used
    as the independent oracle that analytic backprop is checked against.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("objective returned non-finite value during finite differences")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
