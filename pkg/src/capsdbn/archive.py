"""Processed-patch archive and dataset manifest I/O.

The archive is deliberately primitive: a directory of raw little-endian
float32 tensors plus a CSV index, a key=value meta file, and the whitening
statistics — everything inspectable with a hex dump.  All writes go
through a temp-file + rename so partially written artifacts never appear.
"""

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .preprocess import BatchWhitener, ImagePatch

_INDEX = "index.csv"
_META = "meta.txt"
_MEAN = "whiten_mean.f32"
_SCALE = "whiten_scale.f32"


def atomic_write_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, rows):
    """rows: iterable of (image path, category name)."""
    lines = ["path,label"]
    for image_path, label in rows:
        if "," in str(image_path):
            raise ConfigurationError(f"manifest path {image_path!r} may not contain commas")
        lines.append(f"{image_path},{label}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path, categories):
    """Parse and validate a manifest; returns [(absolute path, label id)].

    Errors carry the offending line number; paths resolve relative to the
    manifest's directory.
    """
    if not os.path.exists(path):
        raise ConfigurationError(f"manifest {path} does not exist")
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigurationError(f"{path}: manifest is empty") from None
        if header != ["path", "label"]:
            raise ConfigurationError(
                f"{path}:1: manifest header must be 'path,label', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            rel, label = row[0].strip(), row[1].strip()
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not os.path.exists(full):
                raise ConfigurationError(f"{path}:{lineno}: image {rel!r} does not exist")
            if label not in categories:
                raise ConfigurationError(
                    f"{path}:{lineno}: label {label!r} is not a declared category")
            rows.append((full, categories.index(label)))
    if not rows:
        raise ConfigurationError(f"{path}: manifest lists no images")
    return rows


# ---------------------------------------------------------------------------
# archive


@dataclass
class PatchArchive:
    train: list
    val: list
    whitener: BatchWhitener
    meta: dict


def write_archive(out_dir, train, val, whitener, meta):
    """Persist preprocessed patches with their split and whitening stats."""
    os.makedirs(out_dir, exist_ok=True)
    patches_dir = os.path.join(out_dir, "patches")
    os.makedirs(patches_dir, exist_ok=True)
    index_lines = ["id,label,split,file,channels,height,width"]
    for split, patches in (("train", train), ("val", val)):
        for i, patch in enumerate(patches):
            name = f"{split}-{i:05d}.f32"
            data = np.ascontiguousarray(patch.pixels, dtype="<f4")
            atomic_write_bytes(os.path.join(patches_dir, name), data.tobytes())
            c, h, w = patch.pixels.shape
            index_lines.append(
                f"{patch.source_id},{patch.label},{split},patches/{name},{c},{h},{w}")
    atomic_write_text(os.path.join(out_dir, _INDEX), "\n".join(index_lines) + "\n")
    atomic_write_bytes(os.path.join(out_dir, _MEAN),
                       np.ascontiguousarray(whitener.mean_, dtype="<f4").tobytes())
    atomic_write_bytes(os.path.join(out_dir, _SCALE),
                       np.ascontiguousarray(whitener.scale_, dtype="<f4").tobytes())
    meta = dict(meta)
    meta["whiten_eps"] = repr(float(whitener.eps))
    meta_text = "\n".join(f"{k}={v}" for k, v in meta.items()) + "\n"
    atomic_write_text(os.path.join(out_dir, _META), meta_text)


def read_archive(archive_dir):
    index_path = os.path.join(archive_dir, _INDEX)
    if not os.path.exists(index_path):
        raise ConfigurationError(f"{archive_dir} is not a patch archive (no {_INDEX})")
    meta = {}
    with open(os.path.join(archive_dir, _META), "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    splits = {"train": [], "val": []}
    shape = None
    with open(index_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            shape = (int(row["channels"]), int(row["height"]), int(row["width"]))
            file_path = os.path.join(archive_dir, row["file"])
            raw = np.fromfile(file_path, dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise ConfigurationError(
                    f"{index_path}:{lineno}: {row['file']} holds {raw.size} values, "
                    f"expected {int(np.prod(shape))}")
            label = None if row["label"] == "None" else int(row["label"])
            splits[row["split"]].append(ImagePatch(
                pixels=raw.reshape(shape), label=label, source_id=row["id"]))
    if shape is None:
        raise ConfigurationError(f"{index_path}: archive is empty")
    whitener = BatchWhitener(eps=float(meta.get("whiten_eps", 1e-6)))
    whitener.mean_ = np.fromfile(os.path.join(archive_dir, _MEAN),
                                 dtype="<f4").reshape(shape)
    whitener.scale_ = np.fromfile(os.path.join(archive_dir, _SCALE),
                                  dtype="<f4").reshape(shape)
    whitener.degenerate_fraction_ = 0.0
    whitener.all_degenerate_ = False
    return PatchArchive(train=splits["train"], val=splits["val"],
                        whitener=whitener, meta=meta)
