"""Binary checkpoint container and model (de)serialization.

Layout: magic "CBLF", format version (u32 LE), section count (u32 LE), a
section table of (name length u32, utf-8 name, absolute offset u64, size
u64) entries, then the payload region.  Tensor payloads carry rank and
dims as u32 followed by little-endian IEEE-754 32-bit data; text payloads
are utf-8.  Writers are atomic (temp file + rename) and deterministic, so
save -> load -> save round-trips byte-identically.
"""

import os
import struct
import tempfile

import numpy as np

from .capsnet import CapsNetParams, CapsNetSpec
from .dbn import CrbmParams, CrbmSpec, DbnStack
from .errors import ConfigurationError
from .hybrid import FusionHead
from .preprocess import BatchWhitener

MAGIC = b"CBLF"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# container


def encode_tensor(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(payload):
    (ndim,) = struct.unpack_from("<I", payload, 0)
    dims = struct.unpack_from(f"<{ndim}I", payload, 4)
    data = np.frombuffer(payload, dtype="<f4", offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims, dtype=np.int64)):
        raise ConfigurationError("tensor payload size does not match its dims")
    return data.reshape(dims).copy()


def write_checkpoint(path, sections):
    """Write named sections (str -> str | bytes | ndarray) atomically."""
    payloads = []
    for name, value in sections.items():
        if isinstance(value, np.ndarray):
            payloads.append((name, encode_tensor(value)))
        elif isinstance(value, str):
            payloads.append((name, value.encode("utf-8")))
        elif isinstance(value, bytes):
            payloads.append((name, value))
        else:
            raise ConfigurationError(f"section {name!r} has unsupported type {type(value)}")
    names = [name.encode("utf-8") for name, _ in payloads]
    table_size = sum(4 + len(n) + 8 + 8 for n in names)
    offset = len(MAGIC) + 4 + 4 + table_size
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(payloads))
    for nbytes, (_, payload) in zip(names, payloads):
        blob += struct.pack("<I", len(nbytes)) + nbytes
        blob += struct.pack("<QQ", offset, len(payload))
        offset += len(payload)
    for _, payload in payloads:
        blob += payload
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    """Read all sections back as an ordered name -> bytes mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: checkpoint format version {version} is not supported "
            f"(expected {FORMAT_VERSION})")
    (count,) = struct.unpack_from("<I", blob, 8)
    sections = {}
    cursor = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, cursor)
        cursor += 4
        name = blob[cursor:cursor + name_len].decode("utf-8")
        cursor += name_len
        offset, size = struct.unpack_from("<QQ", blob, cursor)
        cursor += 16
        if offset + size > len(blob):
            raise ConfigurationError(f"{path}: section {name!r} overruns the file")
        sections[name] = blob[offset:offset + size]
    return sections


def _text(sections, name, path):
    if name not in sections:
        raise ConfigurationError(f"{path}: missing checkpoint section {name!r}")
    return sections[name].decode("utf-8")


def _tensor(sections, name, path):
    if name not in sections:
        raise ConfigurationError(f"{path}: missing checkpoint section {name!r}")
    return decode_tensor(sections[name])


def _check_kind(sections, expected, path):
    kind = _text(sections, "kind", path)
    if kind != expected:
        raise ConfigurationError(f"{path}: expected a {expected} checkpoint, found {kind!r}")


def _kv_text(pairs):
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def _parse_kv(text):
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# capsule network


def save_capsnet(path, spec, params, config_text=""):
    dims = _kv_text([
        ("input_channels", spec.input_shape[0]),
        ("input_height", spec.input_shape[1]),
        ("input_width", spec.input_shape[2]),
        ("conv_filters", spec.conv_filters),
        ("conv_kernel", spec.conv_kernel),
        ("primary_groups", spec.primary_groups),
        ("primary_dim", spec.primary_dim),
        ("primary_kernel", spec.primary_kernel),
        ("primary_stride", spec.primary_stride),
        ("category_count", spec.category_count),
        ("category_dim", spec.category_dim),
        ("routing_iters", spec.routing_iters),
        ("conv_activation", spec.conv_activation),
    ])
    write_checkpoint(path, {
        "kind": "capsnet",
        "config": config_text,
        "dims": dims,
        "conv_kernels": params.conv_kernels,
        "conv_bias": params.conv_bias,
        "primary_kernels": params.primary_kernels,
        "primary_bias": params.primary_bias,
        "transforms": params.transforms,
    })


def load_capsnet(path):
    sections = read_checkpoint(path)
    _check_kind(sections, "capsnet", path)
    raw = _parse_kv(_text(sections, "dims", path))
    dims = {k: int(v) for k, v in raw.items() if k != "conv_activation"}
    spec = CapsNetSpec(
        input_shape=(dims["input_channels"], dims["input_height"], dims["input_width"]),
        conv_filters=dims["conv_filters"], conv_kernel=dims["conv_kernel"],
        primary_groups=dims["primary_groups"], primary_dim=dims["primary_dim"],
        primary_kernel=dims["primary_kernel"], primary_stride=dims["primary_stride"],
        category_count=dims["category_count"], category_dim=dims["category_dim"],
        routing_iters=dims["routing_iters"],
        conv_activation=raw.get("conv_activation", "relu"))
    params = CapsNetParams(
        conv_kernels=_tensor(sections, "conv_kernels", path),
        conv_bias=_tensor(sections, "conv_bias", path),
        primary_kernels=_tensor(sections, "primary_kernels", path),
        primary_bias=_tensor(sections, "primary_bias", path),
        transforms=_tensor(sections, "transforms", path))
    expected = (spec.num_children, spec.category_count, spec.category_dim, spec.primary_dim)
    if params.transforms.shape != expected:
        raise ConfigurationError(
            f"{path}: transform tensor shape {params.transforms.shape} does not match "
            f"the embedded dims {expected}")
    return spec, params, _text(sections, "config", path)


# ---------------------------------------------------------------------------
# belief network (+ whitening statistics, so prediction is self-contained)


def save_dbn(path, stack, whitener, config_text=""):
    pairs = [("layer_count", len(stack.layers))]
    sections = {"kind": "dbn", "config": config_text}
    for i, (spec, _params) in enumerate(stack.layers):
        pairs += [
            (f"layer{i}_visible_extent", spec.visible_extent),
            (f"layer{i}_visible_channels", spec.visible_channels),
            (f"layer{i}_groups", spec.groups),
            (f"layer{i}_filter_extent", spec.filter_extent),
            (f"layer{i}_pool_window", spec.pool_window),
        ]
    pairs.append(("whitened", int(whitener is not None)))
    if whitener is not None:
        pairs.append(("whiten_eps", repr(float(whitener.eps))))
    sections["dims"] = _kv_text(pairs)
    for i, (_spec, params) in enumerate(stack.layers):
        sections[f"layer{i}_filters"] = params.filters
        sections[f"layer{i}_hidden_bias"] = params.hidden_bias
        sections[f"layer{i}_visible_bias"] = params.visible_bias
    if whitener is not None:
        sections["whiten_mean"] = whitener.mean_
        sections["whiten_scale"] = whitener.scale_
    write_checkpoint(path, sections)


def load_dbn(path):
    sections = read_checkpoint(path)
    _check_kind(sections, "dbn", path)
    dims = _parse_kv(_text(sections, "dims", path))
    layers = []
    for i in range(int(dims["layer_count"])):
        spec = CrbmSpec(
            visible_extent=int(dims[f"layer{i}_visible_extent"]),
            visible_channels=int(dims[f"layer{i}_visible_channels"]),
            groups=int(dims[f"layer{i}_groups"]),
            filter_extent=int(dims[f"layer{i}_filter_extent"]),
            pool_window=int(dims[f"layer{i}_pool_window"]))
        params = CrbmParams(
            filters=_tensor(sections, f"layer{i}_filters", path),
            hidden_bias=_tensor(sections, f"layer{i}_hidden_bias", path),
            visible_bias=_tensor(sections, f"layer{i}_visible_bias", path))
        layers.append((spec, params))
    stack = DbnStack(layers=layers)
    whitener = None
    if int(dims.get("whitened", 0)):
        whitener = BatchWhitener(eps=float(dims["whiten_eps"]))
        whitener.mean_ = _tensor(sections, "whiten_mean", path)
        whitener.scale_ = _tensor(sections, "whiten_scale", path)
        whitener.degenerate_fraction_ = 0.0
        whitener.all_degenerate_ = False
    return stack, whitener, _text(sections, "config", path)


# ---------------------------------------------------------------------------
# fusion head


def save_fusion(path, head, config_text=""):
    write_checkpoint(path, {
        "kind": "fusion",
        "config": config_text,
        "dims": _kv_text([("category_count", head.weights.shape[0]),
                          ("fused_length", head.weights.shape[1])]),
        "weights": head.weights,
        "bias": head.bias,
    })


def load_fusion(path):
    sections = read_checkpoint(path)
    _check_kind(sections, "fusion", path)
    head = FusionHead(weights=_tensor(sections, "weights", path),
                      bias=_tensor(sections, "bias", path))
    return head, _text(sections, "config", path)
