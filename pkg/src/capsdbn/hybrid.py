"""Hybrid model: capsule-network category evidence fused with belief-network
features through a trainable softmax head, plus the category-to-referral
triage mapping.

Fusion is late: both feature extractors are frozen before the head is
trained, keeping each branch independently testable.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import evalharness
from .capsnet import CapsNetClassifier, forward_batch
from .dbn import DbnFeatureExtractor, extract_features
from .errors import ConfigurationError, UsageError
from .preprocess import BatchWhitener
from .validation import check_labels, check_patch_array


@dataclass
class FusionHead:
    """Multinomial logistic layer over concatenated branch features."""

    weights: np.ndarray   # (K, d_fused)
    bias: np.ndarray      # (K,)

    def copy(self):
        return FusionHead(self.weights.copy(), self.bias.copy())


@dataclass
class ReferralPolicy:
    """Which predicted categories trigger a specialist referral.

    Default: the two cancer-risk categories of the five-way labeling.
    """

    referral_categories: frozenset = field(default_factory=lambda: frozenset({3, 4}))
    category_count: int = 5

    def __post_init__(self):
        self.referral_categories = frozenset(int(c) for c in self.referral_categories)
        bad = [c for c in self.referral_categories
               if not 0 <= c < self.category_count]
        if bad:
            raise ConfigurationError(
                f"referral categories {sorted(bad)} outside [0, {self.category_count})")


@dataclass
class FusionTrainCfg:
    learning_rate: float = 0.1
    epochs: int = 500
    tol: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("fusion learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("fusion epochs must be >= 1")


# ---------------------------------------------------------------------------
# functional core


def fuse_features(norms, dbn_features):
    """Concatenate [capsule norms || belief-net features]; no rescaling.

    Both streams already lie in [0, 1), and the segments stay recoverable
    by slicing at len(norms).
    """
    norms = np.asarray(norms)
    dbn_features = np.asarray(dbn_features)
    if norms.ndim != dbn_features.ndim or norms.ndim not in (1, 2):
        raise ConfigurationError(
            f"feature ranks do not match: {norms.shape} vs {dbn_features.shape}")
    return np.concatenate([norms, dbn_features], axis=-1)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy_and_grads(head, features, labels):
    """Mean cross-entropy of the head on (features, labels) and its exact
    gradients w.r.t. weights and bias."""
    features = np.asarray(features, dtype=np.float64)
    n, k = features.shape[0], head.weights.shape[0]
    logits = features @ head.weights.T.astype(np.float64) + head.bias.astype(np.float64)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, delta.T @ features, delta.sum(axis=0)


def train_fusion(features, labels, cfg=None, validation=None):
    """Fit the softmax fusion head by full-batch gradient descent.

    Requires every category present at least once.  Returns the head and a
    per-epoch trace; stops early once the loss improves by less than
    cfg.tol between epochs.
    """
    cfg = cfg or FusionTrainCfg()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ConfigurationError(f"features must be (n, d), got {features.shape}")
    labels = np.asarray(labels)
    categories = np.unique(labels)
    k = int(labels.max()) + 1
    missing = sorted(set(range(k)) - set(int(c) for c in categories))
    if missing:
        raise ConfigurationError(f"no training examples for categories {missing}")
    head = FusionHead(weights=np.zeros((k, features.shape[1])), bias=np.zeros(k))
    trace = []
    prev_loss = None
    for epoch in range(1, cfg.epochs + 1):
        loss, grad_w, grad_b = cross_entropy_and_grads(head, features, labels)
        head.weights -= cfg.learning_rate * grad_w
        head.bias -= cfg.learning_rate * grad_b
        acc = _head_accuracy(head, features, labels)
        if validation is not None:
            val_loss, _, _ = cross_entropy_and_grads(head, validation[0], validation[1])
            val_acc = _head_accuracy(head, validation[0], validation[1])
        else:
            val_loss, val_acc = loss, acc
        trace.append(evalharness.EpochTrace(
            epoch=epoch, train_loss=loss, train_accuracy=acc,
            val_loss=val_loss, val_accuracy=val_acc))
        if prev_loss is not None and abs(prev_loss - loss) < cfg.tol:
            break
        prev_loss = loss
    return head, trace


def _head_accuracy(head, features, labels):
    logits = features @ head.weights.T + head.bias
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def head_probabilities(head, fused):
    """Softmax class probabilities for fused feature rows (n, d_fused)."""
    fused = np.asarray(fused, dtype=np.float64)
    if fused.shape[-1] != head.weights.shape[1]:
        raise ConfigurationError(
            f"fused feature length {fused.shape[-1]} does not match head "
            f"width {head.weights.shape[1]}")
    logits = fused @ head.weights.T + head.bias
    return np.exp(_log_softmax(np.atleast_2d(logits)))


def predict_hybrid(patch, capsnet, stack, head, whitener=None):
    """Classify one patch with the full hybrid pipe.

    `capsnet` is a fitted CapsNetClassifier, `stack` a DbnStack, `head` the
    fusion head; `whitener` replays the belief-network input transform when
    one was fit.  Returns (category id, probabilities summing to 1).
    """
    pixels = np.asarray(getattr(patch, "pixels", patch), dtype=np.float32)
    cache = forward_batch(pixels[None], capsnet.params_, capsnet.spec_)
    norms = cache.norms[0]
    dbn_input = pixels[None]
    if whitener is not None:
        dbn_input = whitener.transform(dbn_input)
    feats = extract_features(dbn_input, stack)[0]
    probs = head_probabilities(head, fuse_features(norms, feats))[0]
    return int(np.argmax(probs)), probs


def referral_decision(category, policy):
    """True iff the predicted category is in the referral set."""
    category = int(category)
    if not 0 <= category < policy.category_count:
        raise UsageError(
            f"category {category} outside [0, {policy.category_count})")
    return category in policy.referral_categories


def referral_metrics(truths, predictions, policy):
    """Binary precision/recall/F1 for the referral decision itself.

    Rows: decision 'no referral' then 'referral'.
    """
    refer_true = np.array([referral_decision(t, policy) for t in np.asarray(truths)],
                          dtype=np.int64)
    refer_pred = np.array([referral_decision(p, policy) for p in np.asarray(predictions)],
                          dtype=np.int64)
    cm = evalharness.confusion(refer_true, refer_pred, 2)
    return evalharness.precision_recall_f1(cm), cm


# ---------------------------------------------------------------------------
# estimator


class HybridClassifier(ClassifierMixin, BaseEstimator):
    """Three-stage hybrid estimator.

    fit(X, y) runs: (1) whitening statistics + greedy belief-network
    pretraining (unsupervised), (2) capsule-network training (supervised),
    (3) fusion-head training on frozen features.  Components can be passed
    in pre-configured; they are fitted in place.
    """

    def __init__(self, capsnet=None, dbn=None, whiten=True,
                 fusion_learning_rate=0.1, fusion_epochs=500,
                 referral_categories=(3, 4), whitener_eps=1e-6):
        self.capsnet = capsnet
        self.dbn = dbn
        self.whiten = whiten
        self.fusion_learning_rate = fusion_learning_rate
        self.fusion_epochs = fusion_epochs
        self.referral_categories = referral_categories
        self.whitener_eps = whitener_eps

    def fit(self, X, y, validation=None):
        X = check_patch_array(X).astype(np.float32)
        self.capsnet_ = self.capsnet if self.capsnet is not None else CapsNetClassifier()
        self.dbn_ = self.dbn if self.dbn is not None else DbnFeatureExtractor()
        y = check_labels(y, self.capsnet_.category_count)
        self.policy_ = ReferralPolicy(frozenset(self.referral_categories),
                                      category_count=self.capsnet_.category_count)

        if self.whiten:
            self.whitener_ = BatchWhitener(eps=self.whitener_eps).fit(X)
            x_dbn = self.whitener_.transform(X)
        else:
            self.whitener_ = None
            x_dbn = X
        self.dbn_.fit(x_dbn)
        self.capsnet_.fit(X, y, validation=validation)

        fused = self._fused_features(X)
        cfg = FusionTrainCfg(learning_rate=self.fusion_learning_rate,
                             epochs=self.fusion_epochs)
        if validation is not None:
            val_fused = self._fused_features(
                check_patch_array(validation[0]).astype(np.float32))
            val_labels = check_labels(validation[1], self.capsnet_.category_count)
            self.head_, self.fusion_trace_ = train_fusion(
                fused, y, cfg, validation=(val_fused, val_labels))
        else:
            self.head_, self.fusion_trace_ = train_fusion(fused, y, cfg)
        return self

    def _fused_features(self, X):
        norms = self.capsnet_.capsule_norms(X)
        x_dbn = self.whitener_.transform(X) if self.whitener_ is not None else X
        feats = extract_features(x_dbn, self.dbn_.stack_)
        return fuse_features(norms, feats)

    def predict_proba(self, X):
        if not hasattr(self, "head_"):
            raise UsageError("classifier is not fitted")
        X = check_patch_array(X).astype(np.float32)
        return head_probabilities(self.head_, self._fused_features(X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def referral(self, X):
        """Boolean referral flags for each input patch."""
        return np.array([referral_decision(c, self.policy_) for c in self.predict(X)])
