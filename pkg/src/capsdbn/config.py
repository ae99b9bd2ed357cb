"""Run configuration: flat key=value text with eager cross-field validation.

Every training/evaluation command parses one of these files; any geometry
that cannot work (capsule extents, belief-network layer chain, pooling
divisibility) is rejected at parse time with the offending keys named.
"""

from dataclasses import dataclass, fields

from .capsnet import CapsNetSpec
from .dbn import CrbmSpec
from .errors import ConfigurationError
from .evalharness import CATEGORY_NAMES

_REFERRAL_DEFAULT = ("Low Risk of Cancer", "High Risk of Cancer")


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_names(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_rotations(text):
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_opt_int(text):
    return None if not text.strip() else int(text)


def _parse_layers(text):
    layers = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ValueError(f"layer {part!r} must be groups:filter_extent:pool_window")
        layers.append(tuple(int(p) for p in pieces))
    return tuple(layers)


def _show(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(":".join(str(x) for x in layer) for layer in value)
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    seed: int = 12345
    image_extent: int = 32
    channels: int = 3
    categories: tuple = CATEGORY_NAMES
    referral_categories: tuple = _REFERRAL_DEFAULT
    per_category: int = 120
    val_fraction: float = 0.2
    standardize_eps: float = 1e-6
    median_window: int = 3
    augment_horizontal_flip: bool = False
    augment_vertical_flip: bool = False
    augment_rotations: tuple = ()
    augment_crop_extent: int = None
    augment_multiplier: int = 1
    whiten_eps: float = 1e-6
    mini_batch_size: int = 25
    caps_conv_filters: int = 8
    caps_conv_kernel: int = 9
    caps_primary_groups: int = 4
    caps_primary_dim: int = 8
    caps_primary_kernel: int = 9
    caps_primary_stride: int = 2
    caps_category_dim: int = 16
    caps_routing_iters: int = 3
    caps_conv_activation: str = "relu"
    caps_learning_rate: float = 0.001
    caps_epochs: int = 30
    caps_margin_pos: float = 0.9
    caps_margin_neg: float = 0.1
    caps_margin_lambda: float = 0.5
    early_stop_patience: int = 6
    early_stop_min_delta: float = 0.0
    dbn_layers: tuple = ((8, 5, 2), (12, 5, 2), (16, 2, 2))
    dbn_learning_rate: float = 0.05
    dbn_epochs_per_layer: int = 5
    dbn_cd_steps: int = 1
    dbn_weight_decay: float = 0.0
    fusion_learning_rate: float = 0.1
    fusion_epochs: int = 500

    def __post_init__(self):
        self.validate()

    # -- parsing ------------------------------------------------------------

    @classmethod
    def _converters(cls):
        return {
            "categories": _parse_names,
            "referral_categories": _parse_names,
            "augment_rotations": _parse_rotations,
            "augment_crop_extent": _parse_opt_int,
            "dbn_layers": _parse_layers,
        }

    @classmethod
    def from_text(cls, text):
        converters = cls._converters()
        field_types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in field_types:
                raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
            try:
                if key in converters:
                    values[key] = converters[key](value)
                elif field_types[key] is bool:
                    values[key] = _parse_bool(value)
                elif field_types[key] is int:
                    values[key] = int(value)
                elif field_types[key] is float:
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise ConfigurationError(f"config line {lineno}: {key}: {exc}") from exc
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self):
        """Canonical serialization: every key in declaration order."""
        lines = [f"{f.name}={_show(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    # -- derived views ------------------------------------------------------

    @property
    def category_count(self):
        return len(self.categories)

    @property
    def effective_extent(self):
        """Patch extent entering the models (after optional cropping)."""
        return self.augment_crop_extent or self.image_extent

    def category_id(self, name):
        try:
            return self.categories.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown category name {name!r}") from None

    def referral_ids(self):
        return frozenset(self.category_id(name) for name in self.referral_categories)

    def caps_spec(self):
        return CapsNetSpec(
            input_shape=(self.channels, self.effective_extent, self.effective_extent),
            conv_filters=self.caps_conv_filters, conv_kernel=self.caps_conv_kernel,
            primary_groups=self.caps_primary_groups, primary_dim=self.caps_primary_dim,
            primary_kernel=self.caps_primary_kernel, primary_stride=self.caps_primary_stride,
            category_count=self.category_count, category_dim=self.caps_category_dim,
            routing_iters=self.caps_routing_iters,
            conv_activation=self.caps_conv_activation)

    def dbn_specs(self):
        specs = []
        extent, channels = self.effective_extent, self.channels
        for groups, filter_extent, pool_window in self.dbn_layers:
            spec = CrbmSpec(visible_extent=extent, visible_channels=channels,
                            groups=groups, filter_extent=filter_extent,
                            pool_window=pool_window)
            specs.append(spec)
            extent, channels = spec.pool_extent, spec.groups
        return specs

    # -- validation ---------------------------------------------------------

    def validate(self):
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels={self.channels} must be 1 or 3")
        if self.image_extent < 8:
            raise ConfigurationError(f"image_extent={self.image_extent} must be >= 8")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction={self.val_fraction} must be in (0, 1)")
        if len(self.categories) < 2:
            raise ConfigurationError("categories must list at least 2 names")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigurationError("categories contains duplicate names")
        for name in self.referral_categories:
            if name not in self.categories:
                raise ConfigurationError(
                    f"referral_categories entry {name!r} is not in categories")
        if self.median_window % 2 == 0 or self.median_window > self.image_extent:
            raise ConfigurationError(
                f"median_window={self.median_window} must be odd and <= image_extent")
        if self.augment_multiplier < 1:
            raise ConfigurationError(f"augment_multiplier={self.augment_multiplier} must be >= 1")
        if self.augment_crop_extent is not None and not (
                8 <= self.augment_crop_extent <= self.image_extent):
            raise ConfigurationError(
                f"augment_crop_extent={self.augment_crop_extent} must lie in "
                f"[8, image_extent={self.image_extent}]")
        if self.mini_batch_size < 1:
            raise ConfigurationError("mini_batch_size must be >= 1")
        for key in ("caps_learning_rate", "dbn_learning_rate", "fusion_learning_rate"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key} must be >= 0")
        try:
            self.caps_spec()
        except ConfigurationError as exc:
            raise ConfigurationError(
                f"capsule geometry (caps_* keys with image_extent="
                f"{self.effective_extent}): {exc}") from None
        try:
            self.dbn_specs()
        except ConfigurationError as exc:
            raise ConfigurationError(
                f"dbn_layers with visible extent {self.effective_extent}: {exc}") from None
