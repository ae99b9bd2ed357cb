"""Stage orchestration behind the CLI: synthesis, preprocessing, the three
training stages, evaluation, and prediction.

Every stage is deterministic under the config seed, validates checkpoint /
config compatibility up front, and writes its artifacts atomically.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import evalharness
from .archive import (
    atomic_write_text,
    read_archive,
    read_manifest,
    write_archive,
    write_manifest,
)
from .capsnet import CapsNetClassifier
from .checkpoint import (
    load_capsnet,
    load_dbn,
    load_fusion,
    save_capsnet,
    save_dbn,
    save_fusion,
)
from .dbn import DbnTrainCfg, extract_features, pretrain_greedy
from .errors import ConfigurationError
from .evalharness import (
    confusion,
    precision_recall_f1,
    roc_auc_ovr,
    write_confusion_csv,
    write_curves_csv,
    write_metrics_csv,
)
from .hybrid import (
    FusionTrainCfg,
    ReferralPolicy,
    fuse_features,
    head_probabilities,
    referral_decision,
    referral_metrics,
    train_fusion,
)
from .numerics import RandomStream
from .preprocess import AugmentSpec, BatchWhitener, ImagePatch, augment, median_filter, standardize_channels
from .pngio import read_png, write_png


def _atomic_csv(writer, path, *args):
    tmp = f"{path}.tmp"
    writer(tmp, *args)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthesis


def stage_synth(config, out_dir):
    """Render the synthetic dataset to PNGs plus a manifest."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    patches = evalharness.synth_dataset(config.per_category,
                                        categories=config.category_count,
                                        extent=config.image_extent, seed=config.seed)
    rows = []
    for patch in patches:
        name = f"images/{patch.source_id}.png"
        write_png(os.path.join(out_dir, name), patch.pixels)
        rows.append((name, config.categories[patch.label]))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, rows)
    return manifest_path


# ---------------------------------------------------------------------------
# preprocessing


def _stratified_split(rows, val_fraction, seed):
    """Deterministic per-category shuffle + fractional split."""
    by_label = {}
    for i, (_path, label) in enumerate(rows):
        by_label.setdefault(label, []).append(i)
    root = RandomStream(seed)
    train_idx, val_idx = [], []
    for label in sorted(by_label):
        indices = by_label[label]
        perm = root.child(label).permutation(len(indices))
        n_val = 0
        if len(indices) >= 2:
            n_val = min(len(indices) - 1, max(1, round(len(indices) * val_fraction)))
        ordered = [indices[p] for p in perm]
        val_idx.extend(ordered[:n_val])
        train_idx.extend(ordered[n_val:])
    return train_idx, val_idx


def _load_and_clean(config, path, label):
    pixels = read_png(path, channels=config.channels)
    patch = ImagePatch(pixels=pixels, label=label,
                       source_id=os.path.splitext(os.path.basename(path))[0])
    patch = standardize_channels(patch, eps=config.standardize_eps)
    return median_filter(patch, window=config.median_window)


def stage_preprocess(config, manifest_path, out_dir):
    """Manifest -> cleaned/augmented/split patch archive with whitening stats."""
    rows = read_manifest(manifest_path, list(config.categories))
    train_idx, val_idx = _stratified_split(rows, config.val_fraction, config.seed)
    train = [_load_and_clean(config, *rows[i]) for i in train_idx]
    val = [_load_and_clean(config, *rows[i]) for i in val_idx]
    train = augment(train, AugmentSpec(
        horizontal_flip=config.augment_horizontal_flip,
        vertical_flip=config.augment_vertical_flip,
        rotations=config.augment_rotations,
        crop_extent=config.augment_crop_extent,
        multiplier=config.augment_multiplier,
        seed=config.seed))
    if config.augment_crop_extent is not None:
        # validation gets the same extent, no flips/rotations/copies
        val = augment(val, AugmentSpec(crop_extent=config.augment_crop_extent,
                                       multiplier=1, seed=config.seed + 1))
    whitener = BatchWhitener(eps=config.whiten_eps).fit(
        np.stack([p.pixels for p in train]))
    meta = {
        "categories": ",".join(config.categories),
        "channels": config.channels,
        "extent": config.effective_extent,
        "seed": config.seed,
        "train_count": len(train),
        "val_count": len(val),
    }
    write_archive(out_dir, train, val, whitener, meta)
    return out_dir


def _split_arrays(patches):
    X = np.stack([p.pixels for p in patches])
    y = np.array([p.label for p in patches], dtype=np.int64)
    return X, y


def _check_archive_geometry(config, archive):
    sample = archive.train[0].pixels
    expected = (config.channels, config.effective_extent, config.effective_extent)
    if sample.shape != expected:
        raise ConfigurationError(
            f"archive patches have shape {sample.shape} but the config implies "
            f"{expected} (keys: channels, image_extent, augment_crop_extent)")


# ---------------------------------------------------------------------------
# training stages


def stage_pretrain_dbn(config, archive_dir, out_dir):
    archive = read_archive(archive_dir)
    _check_archive_geometry(config, archive)
    os.makedirs(out_dir, exist_ok=True)
    X, _ = _split_arrays(archive.train)
    whitened = archive.whitener.transform(X)
    cfg = DbnTrainCfg(learning_rate=config.dbn_learning_rate,
                      mini_batch_size=config.mini_batch_size,
                      epochs_per_layer=config.dbn_epochs_per_layer,
                      cd_steps=config.dbn_cd_steps,
                      weight_decay=config.dbn_weight_decay,
                      seed=config.seed)
    stack, traces = pretrain_greedy(whitened, config.dbn_specs(), cfg)
    ckpt = os.path.join(out_dir, "dbn.ckpt")
    save_dbn(ckpt, stack, archive.whitener, config.to_text())
    lines = ["layer,epoch,reconstruction_error"]
    for li, errors in enumerate(traces):
        for epoch, err in enumerate(errors, start=1):
            lines.append(f"{li},{epoch},{repr(float(err))}")
    atomic_write_text(os.path.join(out_dir, "dbn_errors.csv"), "\n".join(lines) + "\n")
    return ckpt


def _caps_classifier(config):
    return CapsNetClassifier(
        conv_filters=config.caps_conv_filters, conv_kernel=config.caps_conv_kernel,
        primary_groups=config.caps_primary_groups, primary_dim=config.caps_primary_dim,
        primary_kernel=config.caps_primary_kernel, primary_stride=config.caps_primary_stride,
        category_count=config.category_count, category_dim=config.caps_category_dim,
        routing_iters=config.caps_routing_iters,
        conv_activation=config.caps_conv_activation,
        learning_rate=config.caps_learning_rate,
        epochs=config.caps_epochs, batch_size=config.mini_batch_size,
        margin_pos=config.caps_margin_pos, margin_neg=config.caps_margin_neg,
        margin_lambda=config.caps_margin_lambda, patience=config.early_stop_patience,
        min_delta=config.early_stop_min_delta, seed=config.seed)


def stage_train_caps(config, archive_dir, out_dir):
    archive = read_archive(archive_dir)
    _check_archive_geometry(config, archive)
    os.makedirs(out_dir, exist_ok=True)
    X, y = _split_arrays(archive.train)
    validation = _split_arrays(archive.val) if archive.val else None
    clf = _caps_classifier(config)
    clf.fit(X, y, validation=validation)
    ckpt = os.path.join(out_dir, "capsnet.ckpt")
    save_capsnet(ckpt, clf.spec_, clf.params_, config.to_text())
    _atomic_csv(write_curves_csv, os.path.join(out_dir, "curves.csv"), clf.trace_)
    return ckpt


def _load_caps_for(config, caps_ckpt):
    spec, params, _ = load_capsnet(caps_ckpt)
    if spec != config.caps_spec():
        raise ConfigurationError(
            f"{caps_ckpt}: embedded capsule dims do not match the config "
            f"(caps_* keys / image_extent / categories)")
    clf = _caps_classifier(config)
    clf.spec_ = spec
    clf.params_ = params
    return clf


def _load_dbn_for(config, dbn_ckpt):
    stack, whitener, _ = load_dbn(dbn_ckpt)
    if [layer[0] for layer in stack.layers] != config.dbn_specs():
        raise ConfigurationError(
            f"{dbn_ckpt}: embedded layer dims do not match the config (dbn_layers)")
    return stack, whitener


def _fused(config, caps, stack, whitener, X):
    norms = caps.capsule_norms(X)
    feats = extract_features(whitener.transform(X) if whitener is not None else X, stack)
    return fuse_features(norms, feats)


def stage_train_fusion(config, archive_dir, caps_ckpt, dbn_ckpt, out_dir):
    archive = read_archive(archive_dir)
    _check_archive_geometry(config, archive)
    os.makedirs(out_dir, exist_ok=True)
    caps = _load_caps_for(config, caps_ckpt)
    stack, whitener = _load_dbn_for(config, dbn_ckpt)
    X, y = _split_arrays(archive.train)
    fused = _fused(config, caps, stack, whitener, X)
    validation = None
    if archive.val:
        Xv, yv = _split_arrays(archive.val)
        validation = (_fused(config, caps, stack, whitener, Xv), yv)
    head, trace = train_fusion(
        fused, y, FusionTrainCfg(learning_rate=config.fusion_learning_rate,
                                 epochs=config.fusion_epochs),
        validation=validation)
    ckpt = os.path.join(out_dir, "fusion.ckpt")
    save_fusion(ckpt, head, config.to_text())
    _atomic_csv(write_curves_csv, os.path.join(out_dir, "curves.csv"), trace)
    return ckpt


# ---------------------------------------------------------------------------
# evaluation and prediction


@dataclass
class EvaluationResult:
    accuracy: float
    report: object
    confusion: object
    auc_val: object
    auc_train: object
    referral_report: object


def _hybrid_probs(config, caps, stack, whitener, head, X):
    fused = _fused(config, caps, stack, whitener, X)
    if fused.shape[1] != head.weights.shape[1]:
        raise ConfigurationError(
            f"fusion head width {head.weights.shape[1]} does not match fused "
            f"feature length {fused.shape[1]} (capsule/dbn checkpoints incompatible)")
    return head_probabilities(head, fused)


def stage_evaluate(config, archive_dir, caps_ckpt, dbn_ckpt, fusion_ckpt, out_dir):
    archive = read_archive(archive_dir)
    _check_archive_geometry(config, archive)
    if not archive.val:
        raise ConfigurationError("archive has no validation split to evaluate")
    os.makedirs(out_dir, exist_ok=True)
    caps = _load_caps_for(config, caps_ckpt)
    stack, whitener = _load_dbn_for(config, dbn_ckpt)
    head, _ = load_fusion(fusion_ckpt)

    Xv, yv = _split_arrays(archive.val)
    probs_val = _hybrid_probs(config, caps, stack, whitener, head, Xv)
    preds_val = np.argmax(probs_val, axis=1)
    Xt, yt = _split_arrays(archive.train)
    probs_train = _hybrid_probs(config, caps, stack, whitener, head, Xt)

    cm = confusion(yv, preds_val, config.category_count)
    report = precision_recall_f1(cm)
    auc_val = roc_auc_ovr(probs_val, yv)
    auc_train = roc_auc_ovr(probs_train, yt)
    policy = ReferralPolicy(config.referral_ids(), category_count=config.category_count)
    referral_report, _referral_cm = referral_metrics(yv, preds_val, policy)

    _atomic_csv(write_metrics_csv, os.path.join(out_dir, "metrics.csv"),
                config.categories, report)
    _atomic_csv(write_confusion_csv, os.path.join(out_dir, "confusion.csv"),
                config.categories, cm)
    auc_lines = ["split,category,auc"]
    for split, auc in (("train", auc_train), ("val", auc_val)):
        for name, value in zip(config.categories, auc.per_category):
            auc_lines.append(f"{split},{name},{'skipped' if value is None else repr(value)}")
        auc_lines.append(f"{split},macro,{repr(auc.macro)}")
    atomic_write_text(os.path.join(out_dir, "auc.csv"), "\n".join(auc_lines) + "\n")
    referral_lines = ["decision,precision,recall,f1,support"]
    for name, row in zip(("no_referral", "referral"), referral_report.per_category):
        referral_lines.append(
            f"{name},{repr(row.precision)},{repr(row.recall)},{repr(row.f1)},{row.support}")
    atomic_write_text(os.path.join(out_dir, "referral.csv"),
                      "\n".join(referral_lines) + "\n")
    return EvaluationResult(accuracy=report.accuracy, report=report, confusion=cm,
                            auc_val=auc_val, auc_train=auc_train,
                            referral_report=referral_report)


def _center_crop(pixels, extent):
    _, h, w = pixels.shape
    y0 = (h - extent) // 2
    x0 = (w - extent) // 2
    return np.ascontiguousarray(pixels[:, y0:y0 + extent, x0:x0 + extent])


def stage_predict(config, caps_ckpt, dbn_ckpt, fusion_ckpt, image_paths):
    """Classify raw PNGs; returns one result dict per image."""
    caps = _load_caps_for(config, caps_ckpt)
    stack, whitener = _load_dbn_for(config, dbn_ckpt)
    head, _ = load_fusion(fusion_ckpt)
    policy = ReferralPolicy(config.referral_ids(), category_count=config.category_count)
    results = []
    for path in image_paths:
        patch = _load_and_clean(config, path, None)
        pixels = patch.pixels
        if pixels.shape[1] != config.effective_extent:
            if pixels.shape[1] < config.effective_extent:
                raise ConfigurationError(
                    f"{path}: image extent {pixels.shape[1]} is smaller than the "
                    f"model extent {config.effective_extent}")
            pixels = _center_crop(pixels, config.effective_extent)
        probs = _hybrid_probs(config, caps, stack, whitener, head, pixels[None])[0]
        category = int(np.argmax(probs))
        results.append({
            "path": path,
            "category_id": category,
            "category": config.categories[category],
            "referral": referral_decision(category, policy),
            "probabilities": probs,
        })
    return results


# ---------------------------------------------------------------------------
# whole-pipeline convenience (used by tests and docs)


@dataclass
class PipelineArtifacts:
    manifest: str
    archive: str
    dbn_ckpt: str
    caps_ckpt: str
    fusion_ckpt: str
    eval_dir: str
    result: EvaluationResult


def run_full_pipeline(config, work_dir):
    """synth -> preprocess -> DBN -> capsnet -> fusion -> evaluate."""
    synth_dir = os.path.join(work_dir, "data")
    archive_dir = os.path.join(work_dir, "archive")
    dbn_dir = os.path.join(work_dir, "dbn")
    caps_dir = os.path.join(work_dir, "caps")
    fusion_dir = os.path.join(work_dir, "fusion")
    eval_dir = os.path.join(work_dir, "eval")
    manifest = stage_synth(config, synth_dir)
    stage_preprocess(config, manifest, archive_dir)
    dbn_ckpt = stage_pretrain_dbn(config, archive_dir, dbn_dir)
    caps_ckpt = stage_train_caps(config, archive_dir, caps_dir)
    fusion_ckpt = stage_train_fusion(config, archive_dir, caps_ckpt, dbn_ckpt, fusion_dir)
    result = stage_evaluate(config, archive_dir, caps_ckpt, dbn_ckpt, fusion_ckpt, eval_dir)
    return PipelineArtifacts(manifest=manifest, archive=archive_dir, dbn_ckpt=dbn_ckpt,
                             caps_ckpt=caps_ckpt, fusion_ckpt=fusion_ckpt,
                             eval_dir=eval_dir, result=result)
