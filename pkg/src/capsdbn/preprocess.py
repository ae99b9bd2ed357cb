"""Image preprocessing: per-image standardization, median denoising, lossless
augmentation, and dataset-level whitening for the belief-network branch.

Per-image transforms are pure functions over `ImagePatch`.  The whitening
step is stateful (statistics are fit on training data and replayed on
anything else), so it is exposed as a scikit-learn transformer,
`BatchWhitener`, next to the functional wrapper `whiten_for_dbn`.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigurationError
from .numerics import RandomStream
from .validation import check_patch_array

_ALLOWED_ROTATIONS = (90, 180, 270)


@dataclass
class ImagePatch:
    """One (channels, height, width) pixel tensor with optional label.

    Pixels are in [0, 1] on ingestion; after standardization they are
    unbounded reals.  `source_id` tracks provenance through augmentation.
    """

    pixels: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3:
            raise ConfigurationError(
                f"patch pixels must be (channels, height, width), got {self.pixels.shape}")


@dataclass
class AugmentSpec:
    """Which lossless transforms `augment` may draw, and how many copies."""

    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotations: tuple = ()
    crop_extent: int | None = None
    multiplier: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.multiplier < 1:
            raise ConfigurationError("augment multiplier must be >= 1")
        bad = sorted(set(self.rotations) - set(_ALLOWED_ROTATIONS))
        if bad:
            raise ConfigurationError(f"rotations must be from {_ALLOWED_ROTATIONS}, got {bad}")
        if self.crop_extent is not None and self.crop_extent < 1:
            raise ConfigurationError("crop_extent must be positive")


# ---------------------------------------------------------------------------
# per-image transforms


def standardize_channels(patch, eps=1e-6):
    """Zero-mean / unit-variance normalization per channel of one image.

    Uses population statistics; a constant channel maps to all zeros thanks
    to the eps guard in the denominator.
    """
    px = patch.pixels
    if px.shape[1] * px.shape[2] < 2:
        raise ConfigurationError("standardize_channels needs at least 2 pixels per channel")
    x = px.astype(np.float64)
    mean = x.mean(axis=(1, 2), keepdims=True)
    std = x.std(axis=(1, 2), keepdims=True)
    out = (x - mean) / (std + eps)
    return replace(patch, pixels=out.astype(px.dtype))


def median_filter(patch, window=3):
    """Median filter each channel with a window x window neighborhood.

    Edges are replicate-padded so output extent equals input extent.
    """
    if window % 2 == 0:
        raise ConfigurationError(f"median filter window must be odd, got {window}")
    px = patch.pixels
    if window > min(px.shape[1], px.shape[2]):
        raise ConfigurationError(
            f"median filter window {window} exceeds image extent {px.shape[1:]}")
    half = window // 2
    padded = np.pad(px, ((0, 0), (half, half), (half, half)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(1, 2))
    out = np.median(win, axis=(-2, -1))
    return replace(patch, pixels=out.astype(px.dtype))


def flip_horizontal(pixels):
    """Mirror left-right (an involution)."""
    return np.ascontiguousarray(pixels[:, :, ::-1])


def flip_vertical(pixels):
    """Mirror top-bottom (an involution)."""
    return np.ascontiguousarray(pixels[:, ::-1, :])


def rotate_quarter(pixels, degrees):
    """Rotate by a right angle (90, 180, or 270 degrees counterclockwise)."""
    if degrees not in _ALLOWED_ROTATIONS:
        raise ConfigurationError(f"rotation must be one of {_ALLOWED_ROTATIONS}")
    if degrees in (90, 270) and pixels.shape[1] != pixels.shape[2]:
        raise ConfigurationError("90/270 degree rotations require square patches")
    return np.ascontiguousarray(np.rot90(pixels, degrees // 90, axes=(1, 2)))


def augment(batch, spec):
    """Expand `batch` to len(batch) * spec.multiplier transformed copies.

    Copy 0 of every image is untouched (except for cropping, which applies
    uniformly so all outputs share one extent); further copies draw flips
    and rotations independently.  Deterministic under spec.seed, labels
    preserved, source ids extended with a transform tag.
    """
    root = RandomStream(spec.seed)
    out = []
    for idx, patch in enumerate(batch):
        stream = root.child(idx)
        h, w = patch.pixels.shape[1], patch.pixels.shape[2]
        if spec.crop_extent is not None and spec.crop_extent > min(h, w):
            raise ConfigurationError(
                f"crop_extent {spec.crop_extent} exceeds image extent {h}x{w}")
        for copy in range(spec.multiplier):
            px = patch.pixels
            tag = [f"c{copy}"]
            if copy > 0:
                if spec.horizontal_flip and stream.uniform() < 0.5:
                    px = flip_horizontal(px)
                    tag.append("h")
                if spec.vertical_flip and stream.uniform() < 0.5:
                    px = flip_vertical(px)
                    tag.append("v")
                if spec.rotations:
                    choices = (0,) + tuple(spec.rotations)
                    deg = choices[int(stream.integers(0, len(choices)))]
                    if deg:
                        px = rotate_quarter(px, deg)
                        tag.append(f"r{deg}")
            if spec.crop_extent is not None:
                ce = spec.crop_extent
                y0 = int(stream.integers(0, px.shape[1] - ce + 1))
                x0 = int(stream.integers(0, px.shape[2] - ce + 1))
                px = np.ascontiguousarray(px[:, y0:y0 + ce, x0:x0 + ce])
                tag.append(f"x{x0}y{y0}")
            out.append(ImagePatch(pixels=px.copy(), label=patch.label,
                                  source_id=f"{patch.source_id}#{''.join(tag)}"))
    return out


# ---------------------------------------------------------------------------
# dataset-level whitening


class BatchWhitener(TransformerMixin, BaseEstimator):
    """Per-pixel-position standardization fit on a training batch.

    `fit` records mean and standard deviation at every (channel, row, col)
    position across the batch; `transform` replays exactly that affine map,
    so validation data never influences the statistics.
    """

    def __init__(self, eps=1e-6):
        self.eps = eps

    def fit(self, X, y=None):
        X = check_patch_array(X)
        x = X.astype(np.float64)
        # statistics held in float32 so checkpoints round-trip losslessly
        self.mean_ = x.mean(axis=0).astype(np.float32)
        std = x.std(axis=0)
        self.scale_ = (std + self.eps).astype(np.float32)
        self.degenerate_fraction_ = float((std == 0).mean())
        self.all_degenerate_ = bool((std == 0).all())
        if self.all_degenerate_:
            warnings.warn("whitening statistics are fully degenerate "
                          "(zero variance at every position); outputs will be all zeros")
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            raise NotFittedError("BatchWhitener must be fit before transform")
        X = check_patch_array(X)
        out = (X.astype(np.float64) - self.mean_) / self.scale_
        return out.astype(np.float32)


def whiten_for_dbn(batch, eps=1e-6):
    """Whiten a patch list for the belief-network branch.

    Returns (whitened patches, fitted BatchWhitener).  The whitener replays
    the identical transform on held-out data.
    """
    if not batch:
        raise ConfigurationError("whiten_for_dbn needs a non-empty batch")
    X = np.stack([p.pixels for p in batch])
    whitener = BatchWhitener(eps=eps).fit(X)
    W = whitener.transform(X)
    return [replace(p, pixels=W[i]) for i, p in enumerate(batch)], whitener


# ---------------------------------------------------------------------------
# stateless transformer wrappers, for pipeline composition


@dataclass
class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Transformer form of `standardize_channels` over (N, C, H, W) arrays."""

    eps: float = 1e-6

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_patch_array(X)
        x = X.astype(np.float64)
        mean = x.mean(axis=(2, 3), keepdims=True)
        std = x.std(axis=(2, 3), keepdims=True)
        return ((x - mean) / (std + self.eps)).astype(np.float32)


@dataclass
class MedianDenoiser(TransformerMixin, BaseEstimator):
    """Transformer form of `median_filter` over (N, C, H, W) arrays."""

    window: int = 3

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_patch_array(X)
        out = [median_filter(ImagePatch(pixels=x), self.window).pixels for x in X]
        return np.stack(out)
