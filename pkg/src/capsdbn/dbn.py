"""Three-layer convolutional deep belief network: convolutional restricted
Boltzmann machine units with shared symmetric filters, block max-pooling,
contrastive-divergence training, greedy layer-wise pretraining, and
deterministic feature extraction.

Visible units are real values in [0, 1] treated as Bernoulli probabilities;
binary sampling happens only inside the Gibbs negative phase.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigurationError, NumericError, UsageError
from .numerics import (
    RandomStream,
    conv2d_full_batch,
    conv2d_kernel_grad,
    conv2d_valid_batch,
    sigmoid,
)
from .validation import check_patch_array


# ---------------------------------------------------------------------------
# layer geometry


@dataclass
class CrbmSpec:
    """Geometry of one convolutional RBM layer.

    hidden_extent is always visible_extent - filter_extent + 1, and the
    pooling window must tile the hidden maps exactly; both relations are
    enforced at construction with diagnostics naming the offending keys.
    """

    visible_extent: int
    visible_channels: int
    groups: int
    filter_extent: int
    pool_window: int

    def __post_init__(self):
        if self.visible_extent < 1 or self.visible_channels < 1:
            raise ConfigurationError(
                f"visible_extent={self.visible_extent} and visible_channels="
                f"{self.visible_channels} must be positive")
        if self.groups < 1:
            raise ConfigurationError(f"groups={self.groups} must be >= 1")
        if not 1 <= self.filter_extent <= self.visible_extent:
            raise ConfigurationError(
                f"filter_extent={self.filter_extent} must lie in "
                f"[1, visible_extent={self.visible_extent}]")
        if self.pool_window < 1:
            raise ConfigurationError(f"pool_window={self.pool_window} must be >= 1")
        if self.hidden_extent % self.pool_window != 0:
            raise ConfigurationError(
                f"pool_window={self.pool_window} does not divide hidden_extent="
                f"{self.hidden_extent} (visible_extent={self.visible_extent}, "
                f"filter_extent={self.filter_extent})")

    @property
    def hidden_extent(self):
        return self.visible_extent - self.filter_extent + 1

    @property
    def pool_extent(self):
        return self.hidden_extent // self.pool_window


@dataclass
class CrbmParams:
    """Symmetric filters plus per-group hidden and per-channel visible biases."""

    filters: np.ndarray        # (groups, visible_channels, k, k)
    hidden_bias: np.ndarray    # (groups,)
    visible_bias: np.ndarray   # (visible_channels,)

    def copy(self):
        return CrbmParams(self.filters.copy(), self.hidden_bias.copy(),
                          self.visible_bias.copy())


def init_crbm_params(spec, stream, dtype=np.float32, scale=0.01):
    filters = stream.normal(
        (spec.groups, spec.visible_channels, spec.filter_extent, spec.filter_extent),
        scale=scale)
    return CrbmParams(filters=filters.astype(dtype),
                      hidden_bias=np.zeros(spec.groups, dtype=dtype),
                      visible_bias=np.zeros(spec.visible_channels, dtype=dtype))


@dataclass
class DbnStack:
    """Greedily trained stack of (CrbmSpec, CrbmParams) layers."""

    layers: list

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            below, above = self.layers[i - 1][0], self.layers[i][0]
            if above.visible_extent != below.pool_extent:
                raise ConfigurationError(
                    f"layer {i}: visible_extent={above.visible_extent} must equal "
                    f"layer {i - 1} pool_extent={below.pool_extent}")
            if above.visible_channels != below.groups:
                raise ConfigurationError(
                    f"layer {i}: visible_channels={above.visible_channels} must equal "
                    f"layer {i - 1} groups={below.groups}")

    @property
    def feature_length(self):
        spec = self.layers[-1][0]
        return spec.groups * spec.pool_extent ** 2


@dataclass
class DbnTrainCfg:
    learning_rate: float = 0.05
    mini_batch_size: int = 20
    epochs_per_layer: int = 5
    cd_steps: int = 1
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate and weight_decay must be >= 0")
        if self.mini_batch_size < 1:
            raise ConfigurationError("mini_batch_size must be >= 1")
        if self.cd_steps < 1:
            raise ConfigurationError("cd_steps must be >= 1")
        if self.epochs_per_layer < 0:
            raise ConfigurationError("epochs_per_layer must be >= 0")


# ---------------------------------------------------------------------------
# unit probabilities and sampling


def hidden_prob_batch(v, params):
    """P(h=1 | v) for a batch (B, C, MR, MR) -> (B, N, MQ, MQ)."""
    pre = conv2d_valid_batch(v, params.filters, bias=params.hidden_bias)
    return sigmoid(pre)


def hidden_prob(v, params):
    """Single-image hidden unit probabilities (C, MR, MR) -> (N, MQ, MQ)."""
    v = np.asarray(v)
    if v.ndim != 3 or v.shape[0] != params.filters.shape[1]:
        raise ConfigurationError(
            f"visible shape {v.shape} does not match filters {params.filters.shape}")
    return hidden_prob_batch(v[None], params)[0]


def visible_prob_batch(h, params):
    """P(v=1 | h) for a batch (B, N, MQ, MQ) -> (B, C, MR, MR)."""
    pre = conv2d_full_batch(h, params.filters)
    pre = pre + params.visible_bias.reshape(1, -1, 1, 1)
    return sigmoid(pre)


def visible_prob(h, params):
    """Single-image visible unit probabilities (N, MQ, MQ) -> (C, MR, MR)."""
    h = np.asarray(h)
    if h.ndim != 3 or h.shape[0] != params.filters.shape[0]:
        raise ConfigurationError(
            f"hidden shape {h.shape} does not match filters {params.filters.shape}")
    return visible_prob_batch(h[None], params)[0]


def sample_bernoulli(p, stream):
    """Independent 0/1 draws with success probabilities `p`."""
    p = np.asarray(p)
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise NumericError("Bernoulli probabilities must lie in [0, 1]")
    return (stream.uniform(p.shape) < p).astype(p.dtype)


def max_pool(h, window):
    """Maximum over disjoint window x window blocks of the trailing two axes."""
    h = np.asarray(h)
    extent = h.shape[-1]
    if h.shape[-2] != extent or extent % window != 0:
        raise ConfigurationError(
            f"pool_window={window} does not tile hidden extent {h.shape[-2:]}")
    out_extent = extent // window
    shaped = h.reshape(*h.shape[:-2], out_extent, window, out_extent, window)
    return shaped.max(axis=(-3, -1))


# ---------------------------------------------------------------------------
# contrastive divergence


def _pair_statistics(v, h, filter_extent):
    """Sum over batch and positions of visible x hidden co-activations."""
    return conv2d_kernel_grad(v, h, filter_extent)


def apply_cd_update(params, pos, neg, batch_size, cfg):
    """In-place parameter update from positive/negative phase statistics.

    pos/neg are dicts with 'pairs' (N, C, k, k), 'hidden' (N,), 'visible'
    (C,) statistic sums.  Identical phases reduce the filter update to pure
    weight decay.
    """
    lr = cfg.learning_rate
    b = float(batch_size)
    params.filters += (lr * (pos["pairs"] - neg["pairs"]) / b
                       - lr * cfg.weight_decay * params.filters).astype(params.filters.dtype)
    params.hidden_bias += (lr * (pos["hidden"] - neg["hidden"]) / b).astype(
        params.hidden_bias.dtype)
    params.visible_bias += (lr * (pos["visible"] - neg["visible"]) / b).astype(
        params.visible_bias.dtype)
    return params


def _phase_stats(v, h, filter_extent):
    return {
        "pairs": _pair_statistics(v, h, filter_extent),
        "hidden": h.sum(axis=(0, 2, 3)) / float(h.shape[2] * h.shape[3]),
        "visible": v.sum(axis=(0, 2, 3)) / float(v.shape[2] * v.shape[3]),
    }


def cd_step(batch, params, cfg, stream):
    """One contrastive-divergence update over a mini-batch.

    Positive statistics come from the data; negative statistics from
    cfg.cd_steps alternating Gibbs steps with binary hidden samples and
    mean-field visible reconstructions.  Returns (params, reconstruction
    error), where the error is the mean squared difference between the
    batch and its one-step reconstruction.
    """
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise UsageError("cd_step needs a non-empty batch")
        batch = np.stack(batch)
    if batch.ndim != 4:
        raise ConfigurationError(f"batch must be (B, C, MR, MR), got {batch.shape}")
    if batch.shape[0] == 0:
        raise UsageError("cd_step needs a non-empty batch")
    k = params.filters.shape[2]

    pos_h = hidden_prob_batch(batch, params)
    h_state = sample_bernoulli(pos_h, stream)
    recon = None
    for step in range(cfg.cd_steps):
        v_model = visible_prob_batch(h_state, params)
        if recon is None:
            recon = v_model
        neg_h = hidden_prob_batch(v_model, params)
        if step < cfg.cd_steps - 1:
            h_state = sample_bernoulli(neg_h, stream)

    pos = _phase_stats(batch.astype(np.float64), pos_h, k)
    neg = _phase_stats(v_model, neg_h, k)
    apply_cd_update(params, pos, neg, batch.shape[0], cfg)
    recon_error = float(np.mean((batch.astype(np.float64) - recon) ** 2))
    return params, recon_error


def pretrain_greedy(data, layer_specs, cfg):
    """Greedy layer-wise pretraining of a CRBM stack.

    Each layer trains by contrastive divergence on the pooled hidden
    probabilities of the layer below (probabilities, not samples, for a
    lower-variance signal).  Returns (DbnStack, per-layer lists of epoch
    mean reconstruction errors).
    """
    data = check_patch_array(np.asarray(data) if not isinstance(data, (list, tuple))
                             else np.stack(data))
    stream = RandomStream(cfg.seed)
    current = data.astype(np.float32)
    layers, traces = [], []
    for li, spec in enumerate(layer_specs):
        if spec.visible_extent != current.shape[2] or spec.visible_channels != current.shape[1]:
            raise ConfigurationError(
                f"layer {li}: visible_extent={spec.visible_extent}, visible_channels="
                f"{spec.visible_channels} do not match incoming data {current.shape[1:]}")
        params = init_crbm_params(spec, stream.child(li))
        errors = []
        n = current.shape[0]
        for _epoch in range(cfg.epochs_per_layer):
            order = stream.permutation(n)
            total, seen = 0.0, 0
            for start in range(0, n, cfg.mini_batch_size):
                idx = order[start:start + cfg.mini_batch_size]
                _, err = cd_step(current[idx], params, cfg, stream)
                total += err * len(idx)
                seen += len(idx)
            errors.append(total / seen)
        layers.append((spec, params))
        traces.append(errors)
        current = max_pool(hidden_prob_batch(current, params), spec.pool_window).astype(
            np.float32)
    return DbnStack(layers=layers), traces


def extract_features(x, stack):
    """Deterministic feature vector: pooled hidden probabilities through
    every layer, flattened top pooling maps (no sampling anywhere)."""
    x = np.asarray(x)
    single = x.ndim == 3
    batch = x[None] if single else x
    first_spec = stack.layers[0][0]
    if batch.shape[1] != first_spec.visible_channels or batch.shape[2] != first_spec.visible_extent:
        raise ConfigurationError(
            f"input shape {batch.shape[1:]} does not match layer 0 "
            f"(visible_channels={first_spec.visible_channels}, "
            f"visible_extent={first_spec.visible_extent})")
    current = batch
    for spec, params in stack.layers:
        current = max_pool(hidden_prob_batch(current, params), spec.pool_window)
    flat = current.reshape(current.shape[0], -1)
    return flat[0] if single else flat


# ---------------------------------------------------------------------------
# estimator


class DbnFeatureExtractor(TransformerMixin, BaseEstimator):
    """Greedy CRBM stack as a feature transformer.

    `layers` is a sequence of (groups, filter_extent, pool_window) tuples;
    visible extents and channel counts are inferred from the data and the
    chain relations at fit time.
    """

    def __init__(self, layers=((8, 5, 2), (12, 5, 2), (16, 2, 2)),
                 learning_rate=0.05, mini_batch_size=20, epochs_per_layer=5,
                 cd_steps=1, weight_decay=0.0, seed=0):
        self.layers = layers
        self.learning_rate = learning_rate
        self.mini_batch_size = mini_batch_size
        self.epochs_per_layer = epochs_per_layer
        self.cd_steps = cd_steps
        self.weight_decay = weight_decay
        self.seed = seed

    def _layer_specs(self, input_shape):
        specs = []
        extent, channels = input_shape[1], input_shape[0]
        for groups, filter_extent, pool_window in self.layers:
            spec = CrbmSpec(visible_extent=extent, visible_channels=channels,
                            groups=groups, filter_extent=filter_extent,
                            pool_window=pool_window)
            specs.append(spec)
            extent, channels = spec.pool_extent, spec.groups
        return specs

    def fit(self, X, y=None):
        X = check_patch_array(X)
        cfg = DbnTrainCfg(learning_rate=self.learning_rate,
                          mini_batch_size=self.mini_batch_size,
                          epochs_per_layer=self.epochs_per_layer,
                          cd_steps=self.cd_steps, weight_decay=self.weight_decay,
                          seed=self.seed)
        self.stack_, self.error_traces_ = pretrain_greedy(
            X, self._layer_specs(X.shape[1:]), cfg)
        return self

    def transform(self, X):
        if not hasattr(self, "stack_"):
            raise UsageError("extractor is not fitted")
        X = check_patch_array(X)
        return extract_features(X, self.stack_)
