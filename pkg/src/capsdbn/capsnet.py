"""Capsule network: convolutional front end, primary capsules, category
capsules coupled by iterative routing-by-agreement, margin loss, and exact
analytic gradients through the unrolled routing loop.

Routing state (logits, couplings, capsule outputs) is always carried in
float64 so the coupling-row and fixed-point invariants hold to 1e-12;
convolution parameters stay in their own dtype (float32 by default,
float64 for gradient checking).
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import evalharness
from .errors import ConfigurationError, UsageError
from .numerics import (
    RandomStream,
    conv2d_input_grad,
    conv2d_kernel_grad,
    conv2d_valid_batch,
    ensure_finite,
    relu,
    sigmoid,
    softmax,
)
from .validation import check_labels, check_patch_array

_TINY = 1e-30


# ---------------------------------------------------------------------------
# architecture


@dataclass
class CapsNetSpec:
    """Architecture of the capsule network.

    The derived spatial extents are validated eagerly so an impossible
    geometry is rejected before any parameter is allocated.
    """

    input_shape: tuple
    conv_filters: int = 8
    conv_kernel: int = 9
    primary_groups: int = 4
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    category_count: int = 5
    category_dim: int = 16
    routing_iters: int = 3
    conv_activation: str = "relu"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.conv_activation not in ("relu", "sigmoid"):
            raise ConfigurationError(
                f"conv_activation must be 'relu' or 'sigmoid', got {self.conv_activation!r}")
        if self.routing_iters < 1:
            raise ConfigurationError("routing_iters must be >= 1")
        if self.primary_dim < 2 or self.category_dim < 2:
            raise ConfigurationError("primary_dim and category_dim must be >= 2")
        if self.category_count < 2:
            raise ConfigurationError("category_count must be >= 2")
        if self.primary_stride < 1:
            raise ConfigurationError("primary_stride must be >= 1")
        c, h, w = self.input_shape
        if min(self.conv_out_hw) < 1:
            raise ConfigurationError(
                f"conv_kernel={self.conv_kernel} leaves no spatial extent for input {h}x{w}")
        if min(self.primary_out_hw) < 1:
            raise ConfigurationError(
                f"primary_kernel={self.primary_kernel} with primary_stride="
                f"{self.primary_stride} leaves no spatial extent after the conv stage")

    @property
    def conv_out_hw(self):
        _, h, w = self.input_shape
        return (h - self.conv_kernel + 1, w - self.conv_kernel + 1)

    @property
    def primary_out_hw(self):
        h, w = self.conv_out_hw
        if h < self.primary_kernel or w < self.primary_kernel:
            return (0, 0)
        return ((h - self.primary_kernel) // self.primary_stride + 1,
                (w - self.primary_kernel) // self.primary_stride + 1)

    @property
    def num_children(self):
        h, w = self.primary_out_hw
        return self.primary_groups * h * w


@dataclass
class CapsNetParams:
    """All trainable arrays plus a version counter for cache staleness."""

    conv_kernels: np.ndarray      # (F, C, k0, k0)
    conv_bias: np.ndarray         # (F,)
    primary_kernels: np.ndarray   # (G * d1, F, k1, k1)
    primary_bias: np.ndarray      # (G * d1,)
    transforms: np.ndarray        # (children, K, d2, d1)
    version: int = 0

    def arrays(self):
        return (self.conv_kernels, self.conv_bias, self.primary_kernels,
                self.primary_bias, self.transforms)

    def bump(self):
        self.version += 1

    def copy(self):
        return CapsNetParams(*(a.copy() for a in self.arrays()), version=self.version)


@dataclass
class CapsNetGrads:
    conv_kernels: np.ndarray
    conv_bias: np.ndarray
    primary_kernels: np.ndarray
    primary_bias: np.ndarray
    transforms: np.ndarray

    def arrays(self):
        return (self.conv_kernels, self.conv_bias, self.primary_kernels,
                self.primary_bias, self.transforms)


def init_capsnet_params(spec, stream, dtype=np.float32, transform_scale=0.1):
    """He-scaled convolution kernels, zero biases, Gaussian prediction maps."""
    c = spec.input_shape[0]
    f, k0 = spec.conv_filters, spec.conv_kernel
    gd, k1 = spec.primary_groups * spec.primary_dim, spec.primary_kernel
    conv_kernels = stream.normal((f, c, k0, k0), scale=np.sqrt(2.0 / (c * k0 * k0)))
    primary_kernels = stream.normal((gd, f, k1, k1), scale=np.sqrt(2.0 / (f * k1 * k1)))
    transforms = stream.normal(
        (spec.num_children, spec.category_count, spec.category_dim, spec.primary_dim),
        scale=transform_scale)
    return CapsNetParams(
        conv_kernels=conv_kernels.astype(dtype),
        conv_bias=np.zeros(f, dtype=dtype),
        primary_kernels=primary_kernels.astype(dtype),
        primary_bias=np.zeros(gd, dtype=dtype),
        transforms=transforms.astype(dtype),
    )


# ---------------------------------------------------------------------------
# squash nonlinearity


def squash(vector):
    """Scale a vector to norm ||s||^2 / (1 + ||s||^2), direction preserved.

    Written as s * ||s|| / (1 + ||s||^2) so the zero vector maps to the
    zero vector with no division anywhere.
    """
    s = np.asarray(vector, dtype=np.float64)
    norm = np.sqrt(np.sum(s * s))
    return s * (norm / (1.0 + norm * norm))


def squash_vectors(s):
    """`squash` applied along the last axis of a stacked array (float64)."""
    s = np.asarray(s, dtype=np.float64)
    norm = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    return s * (norm / (1.0 + norm * norm))


def _squash_backward(grad_out, s):
    """Vector-Jacobian product of `squash_vectors` at pre-activation `s`."""
    norm = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    gain = norm / (1.0 + norm * norm)
    dgain = (1.0 - norm * norm) / (1.0 + norm * norm) ** 2
    inner = np.sum(grad_out * s, axis=-1, keepdims=True)
    return gain * grad_out + (dgain / np.maximum(norm, _TINY)) * inner * s


# ---------------------------------------------------------------------------
# routing by agreement


@dataclass
class RoutingState:
    """Final routing quantities for one example, plus per-iteration couplings."""

    logits: np.ndarray           # (children, K)
    couplings: np.ndarray        # (children, K), rows sum to 1 over K
    preactivations: np.ndarray   # (K, d2)
    outputs: np.ndarray          # (K, d2), every norm < 1
    coupling_history: list = field(default_factory=list)


def _route_forward(predictions, iters):
    """Unrolled routing over a batch of prediction tensors.

    predictions: (B, children, K, d2) float64.  Returns the final outputs
    (B, K, d2) and the tape of per-iteration couplings, preactivations,
    outputs, and final logits.
    """
    b_logits = np.zeros(predictions.shape[:3], dtype=np.float64)
    couplings, preacts, outputs = [], [], []
    for it in range(iters):
        c = softmax(b_logits, axis=2)
        s = np.einsum("bik,bikq->bkq", c, predictions)
        v = squash_vectors(s)
        couplings.append(c)
        preacts.append(s)
        outputs.append(v)
        if it < iters - 1:
            b_logits = b_logits + np.einsum("bikq,bkq->bik", predictions, v)
    tape = {"couplings": couplings, "preacts": preacts, "outputs": outputs,
            "logits": b_logits}
    return outputs[-1], tape


def _route_backward(grad_v, predictions, tape):
    """Gradient of the routing output w.r.t. the prediction tensors."""
    iters = len(tape["couplings"])
    grad_u = np.zeros_like(predictions)
    db_next = None
    dv = grad_v
    for t in range(iters - 1, -1, -1):
        if t < iters - 1:
            dv = np.einsum("bik,bikq->bkq", db_next, predictions)
            grad_u += np.einsum("bik,bkq->bikq", db_next, tape["outputs"][t])
        c = tape["couplings"][t]
        ds = _squash_backward(dv, tape["preacts"][t])
        dc = np.einsum("bkq,bikq->bik", ds, predictions)
        grad_u += np.einsum("bik,bkq->bikq", c, ds)
        db = c * (dc - np.sum(c * dc, axis=2, keepdims=True))
        if t < iters - 1:
            db = db + db_next
        db_next = db
    return grad_u


def route(predictions, iters):
    """Route one example's prediction tensor (children, K, d2) for `iters`
    rounds of agreement and return the resulting `RoutingState`."""
    if iters < 1:
        raise ConfigurationError("routing iteration count must be >= 1")
    preds = np.asarray(predictions, dtype=np.float64)
    ensure_finite("routing predictions", preds)
    if preds.ndim != 3:
        raise ConfigurationError(
            f"predictions must be (children, parents, dim), got {preds.shape}")
    _, tape = _route_forward(preds[None], iters)
    return RoutingState(
        logits=tape["logits"][0],
        couplings=tape["couplings"][-1][0],
        preactivations=tape["preacts"][-1][0],
        outputs=tape["outputs"][-1][0],
        coupling_history=[c[0] for c in tape["couplings"]],
    )


# ---------------------------------------------------------------------------
# forward / loss / backward


@dataclass
class ForwardCache:
    inputs: np.ndarray
    conv_pre: np.ndarray
    conv_out: np.ndarray
    primary_pre: np.ndarray     # (B, children, d1) before squash
    primary_out: np.ndarray     # (B, children, d1) after squash
    predictions: np.ndarray     # (B, children, K, d2)
    tape: dict
    class_vectors: np.ndarray   # (B, K, d2)
    norms: np.ndarray           # (B, K)
    spec: CapsNetSpec
    params: CapsNetParams
    params_version: int


def forward_batch(x, params, spec):
    """Run the full network over (B, C, H, W) inputs; returns a ForwardCache."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ConfigurationError(
            f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    b = x.shape[0]
    g, d1 = spec.primary_groups, spec.primary_dim
    ph, pw = spec.primary_out_hw

    z1 = conv2d_valid_batch(x, params.conv_kernels, bias=params.conv_bias)
    a1 = relu(z1) if spec.conv_activation == "relu" else sigmoid(z1)
    z2 = conv2d_valid_batch(a1, params.primary_kernels, bias=params.primary_bias,
                            stride=spec.primary_stride)
    pre = z2.reshape(b, g, d1, ph, pw).transpose(0, 1, 3, 4, 2).reshape(
        b, spec.num_children, d1)
    u = squash_vectors(pre)
    preds = np.einsum("ikqd,bid->bikq", params.transforms, u)
    v, tape = _route_forward(preds, spec.routing_iters)
    norms = np.sqrt(np.sum(v * v, axis=-1))
    ensure_finite("capsule norms", norms)
    return ForwardCache(inputs=x, conv_pre=z1, conv_out=a1, primary_pre=pre,
                        primary_out=u, predictions=preds, tape=tape,
                        class_vectors=v, norms=norms, spec=spec, params=params,
                        params_version=params.version)


def forward(patch, params, spec):
    """Single-image forward pass.

    Accepts an `ImagePatch` or a raw (C, H, W) array; returns
    (class_vectors (K, d2), norms (K,), cache).
    """
    pixels = getattr(patch, "pixels", patch)
    cache = forward_batch(np.asarray(pixels)[None], params, spec)
    return cache.class_vectors[0], cache.norms[0], cache


def margin_loss(norms, label, margin_pos=0.9, margin_neg=0.1, lam=0.5):
    """Squared-hinge margin loss over one example's capsule norms."""
    norms = np.asarray(norms, dtype=np.float64)
    if not 0 <= label < norms.shape[-1]:
        raise ConfigurationError(f"label {label} out of range for {norms.shape[-1]} categories")
    present = np.zeros(norms.shape[-1])
    present[label] = 1.0
    pos = np.maximum(0.0, margin_pos - norms) ** 2
    neg = np.maximum(0.0, norms - margin_neg) ** 2
    return float(np.sum(present * pos + lam * (1.0 - present) * neg))


def margin_loss_batch(norms, labels, margin_pos=0.9, margin_neg=0.1, lam=0.5):
    """Mean margin loss over a batch; labels is an int array (B,)."""
    norms = np.asarray(norms, dtype=np.float64)
    present = np.zeros_like(norms)
    present[np.arange(norms.shape[0]), labels] = 1.0
    pos = np.maximum(0.0, margin_pos - norms) ** 2
    neg = np.maximum(0.0, norms - margin_neg) ** 2
    return float(np.mean(np.sum(present * pos + lam * (1.0 - present) * neg, axis=1)))


def backward(cache, labels, margin_pos=0.9, margin_neg=0.1, lam=0.5):
    """Exact gradient of the batch-mean margin loss w.r.t. every parameter.

    Unrolls the routing iterations rather than treating couplings as
    constants, so the result matches central finite differences.
    """
    params, spec = cache.params, cache.spec
    if cache.params_version != params.version:
        raise UsageError("forward cache is stale: parameters were updated after forward()")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b = cache.inputs.shape[0]
    if labels.shape[0] != b:
        raise UsageError(f"got {labels.shape[0]} labels for a batch of {b}")

    norms, v = cache.norms, cache.class_vectors
    present = np.zeros_like(norms)
    present[np.arange(b), labels] = 1.0
    dnorm = (present * (-2.0) * np.maximum(0.0, margin_pos - norms)
             + lam * (1.0 - present) * 2.0 * np.maximum(0.0, norms - margin_neg)) / b
    dv = dnorm[:, :, None] * v / np.maximum(norms[:, :, None], _TINY)

    grad_preds = _route_backward(dv, cache.predictions, cache.tape)
    grad_transforms = np.einsum("bikq,bid->ikqd", grad_preds, cache.primary_out)
    du = np.einsum("ikqd,bikq->bid", params.transforms, grad_preds)
    dpre = _squash_backward(du, cache.primary_pre)

    g, d1 = spec.primary_groups, spec.primary_dim
    ph, pw = spec.primary_out_hw
    dz2 = dpre.reshape(b, g, ph, pw, d1).transpose(0, 1, 4, 2, 3).reshape(
        b, g * d1, ph, pw)
    dz2 = dz2.astype(params.primary_kernels.dtype)
    grad_primary_bias = dz2.sum(axis=(0, 2, 3))
    grad_primary_kernels = conv2d_kernel_grad(cache.conv_out, dz2, spec.primary_kernel,
                                              stride=spec.primary_stride)
    da1 = conv2d_input_grad(dz2, params.primary_kernels, spec.primary_stride,
                            spec.conv_out_hw)
    if spec.conv_activation == "relu":
        dz1 = da1 * (cache.conv_pre > 0)
    else:
        dz1 = da1 * cache.conv_out * (1.0 - cache.conv_out)
    grad_conv_bias = dz1.sum(axis=(0, 2, 3))
    grad_conv_kernels = conv2d_kernel_grad(cache.inputs, dz1, spec.conv_kernel)

    dt = params.conv_kernels.dtype
    return CapsNetGrads(
        conv_kernels=grad_conv_kernels.astype(dt),
        conv_bias=grad_conv_bias.astype(dt),
        primary_kernels=grad_primary_kernels.astype(dt),
        primary_bias=grad_primary_bias.astype(dt),
        transforms=grad_transforms.astype(dt),
    )


def predict(norms):
    """Category with the largest capsule norm; ties break to the lowest id."""
    norms = np.asarray(norms)
    if norms.size == 0:
        raise ConfigurationError("predict needs at least one category norm")
    return int(np.argmax(norms, axis=-1)) if norms.ndim == 1 else np.argmax(norms, axis=-1)


# ---------------------------------------------------------------------------
# Adam (training plumbing)


class _AdamState:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params, grads):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for arr, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(arr.dtype)
        params.bump()


# ---------------------------------------------------------------------------
# estimator


class CapsNetClassifier(ClassifierMixin, BaseEstimator):
    """Capsule-network classifier with margin-loss training.

    fit(X, y) expects X of shape (n_samples, channels, height, width).
    Pass validation data via fit(..., validation=(X_val, y_val)) to drive
    early stopping; otherwise the training split doubles as validation in
    the epoch trace.
    """

    def __init__(self, conv_filters=8, conv_kernel=9, primary_groups=4,
                 primary_dim=8, primary_kernel=9, primary_stride=2,
                 category_count=5, category_dim=16, routing_iters=3,
                 conv_activation="relu", learning_rate=1e-3, epochs=30,
                 batch_size=32, margin_pos=0.9, margin_neg=0.1,
                 margin_lambda=0.5, patience=6, min_delta=0.0, seed=0):
        self.conv_filters = conv_filters
        self.conv_kernel = conv_kernel
        self.primary_groups = primary_groups
        self.primary_dim = primary_dim
        self.primary_kernel = primary_kernel
        self.primary_stride = primary_stride
        self.category_count = category_count
        self.category_dim = category_dim
        self.routing_iters = routing_iters
        self.conv_activation = conv_activation
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.margin_pos = margin_pos
        self.margin_neg = margin_neg
        self.margin_lambda = margin_lambda
        self.patience = patience
        self.min_delta = min_delta
        self.seed = seed

    def _make_spec(self, input_shape):
        return CapsNetSpec(
            input_shape=input_shape, conv_filters=self.conv_filters,
            conv_kernel=self.conv_kernel, primary_groups=self.primary_groups,
            primary_dim=self.primary_dim, primary_kernel=self.primary_kernel,
            primary_stride=self.primary_stride, category_count=self.category_count,
            category_dim=self.category_dim, routing_iters=self.routing_iters,
            conv_activation=self.conv_activation)

    def fit(self, X, y, validation=None):
        X = check_patch_array(X).astype(np.float32)
        y = check_labels(y, self.category_count)
        self.spec_ = self._make_spec(X.shape[1:])
        stream = RandomStream(self.seed)
        self.params_ = init_capsnet_params(self.spec_, stream)
        optimizer = _AdamState(self.params_, lr=self.learning_rate)
        if validation is not None:
            x_val = check_patch_array(validation[0]).astype(np.float32)
            y_val = check_labels(validation[1], self.category_count)
        cfg = evalharness.EarlyStopCfg(patience=self.patience, max_epochs=self.epochs,
                                       min_delta=self.min_delta)
        trace = []
        best = None
        n = X.shape[0]
        for epoch in range(1, self.epochs + 1):
            order = stream.permutation(n)
            losses, hits = [], 0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                cache = forward_batch(X[idx], self.params_, self.spec_)
                losses.append(margin_loss_batch(
                    cache.norms, y[idx], self.margin_pos, self.margin_neg,
                    self.margin_lambda) * len(idx))
                hits += int(np.sum(np.argmax(cache.norms, axis=1) == y[idx]))
                grads = backward(cache, y[idx], self.margin_pos, self.margin_neg,
                                 self.margin_lambda)
                optimizer.step(self.params_, grads)
            train_loss = float(np.sum(losses) / n)
            train_acc = hits / n
            if validation is not None:
                val_loss, val_acc = self._evaluate(x_val, y_val)
            else:
                val_loss, val_acc = train_loss, train_acc
            trace.append(evalharness.EpochTrace(
                epoch=epoch, train_loss=train_loss, train_accuracy=train_acc,
                val_loss=val_loss, val_accuracy=val_acc))
            decision = evalharness.early_stop(trace, cfg)
            if best is None or decision.best_epoch == epoch:
                best = (epoch, self.params_.copy())
            if decision.stop:
                break
        self.best_epoch_, self.params_ = best
        self.trace_ = trace
        return self

    def _evaluate(self, X, y):
        losses, hits = [], 0
        for start in range(0, X.shape[0], self.batch_size):
            sl = slice(start, start + self.batch_size)
            cache = forward_batch(X[sl], self.params_, self.spec_)
            losses.append(margin_loss_batch(
                cache.norms, y[sl], self.margin_pos, self.margin_neg,
                self.margin_lambda) * (cache.norms.shape[0]))
            hits += int(np.sum(np.argmax(cache.norms, axis=1) == y[sl]))
        return float(np.sum(losses) / X.shape[0]), hits / X.shape[0]

    def capsule_norms(self, X):
        """Per-example category capsule norms, shape (n_samples, K)."""
        if not hasattr(self, "params_"):
            raise UsageError("classifier is not fitted")
        X = check_patch_array(X).astype(np.float32)
        out = []
        for start in range(0, X.shape[0], self.batch_size):
            cache = forward_batch(X[start:start + self.batch_size], self.params_, self.spec_)
            out.append(cache.norms)
        return np.concatenate(out, axis=0)

    def predict(self, X):
        return np.argmax(self.capsule_norms(X), axis=1)
