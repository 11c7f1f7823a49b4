"""Architecture/run configuration: dataclasses plus the flat key=value format.

Config files are diff-friendly: one ``key = value`` per line, ``#`` comments.
Unknown keys are rejected; every key has a documented default. The effective
config is echoed into the run's output directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .kan import ProjectionKind


class ConfigError(ValueError):
    """Invalid configuration (bad key, unparsable or inconsistent value)."""


def _parse_extent(text: str) -> tuple[int, int, int]:
    parts = [p for p in str(text).replace(",", " ").split() if p]
    if len(parts) == 1:
        v = int(parts[0])
        return (v, v, v)
    if len(parts) == 3:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    raise ConfigError(f"expected one or three integers, got {text!r}")


def _parse_taps(text: str) -> tuple[int, ...]:
    parts = [p for p in str(text).replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def default_taps(depth: int) -> tuple[int, ...]:
    """Four evenly spaced taps ending at the final block (depth % 4 == 0)."""
    if depth % 4 != 0:
        raise ConfigError(f"cannot derive default taps for depth {depth}; set model.taps")
    q = depth // 4
    return (q, 2 * q, 3 * q, depth)


@dataclass(frozen=True)
class UNETVLConfig:
    """Single source of architectural truth for one model."""

    h: int = 32
    w: int = 32
    d: int = 32
    in_channels: int = 1
    patch: tuple[int, int, int] = (8, 8, 8)
    embed_dim: int = 32
    depth: int = 4
    taps: tuple[int, ...] = ()
    head_dim: int = 16
    expansion: int = 2
    projection: ProjectionKind = ProjectionKind.CHEBYSHEV
    degree: int = 4
    num_classes: int = 3

    def __post_init__(self):
        if not self.taps:
            object.__setattr__(self, "taps", default_taps(self.depth))
        object.__setattr__(self, "projection", ProjectionKind(self.projection))
        self.validate()

    def validate(self) -> None:
        names = ("height", "width", "depth")
        for name, ext, p in zip(names, (self.h, self.w, self.d), self.patch):
            if p < 1 or ext % p != 0:
                raise ConfigError(f"volume {name} {ext} not divisible by patch {p}")
        if list(self.taps) != sorted(self.taps):
            raise ConfigError(f"taps must be ascending, got {self.taps}")
        if self.taps and self.taps[-1] > self.depth:
            raise ConfigError(f"tap {self.taps[-1]} exceeds depth {self.depth}")
        if any(t < 1 for t in self.taps):
            raise ConfigError("tap indices are 1-based and must be >= 1")
        inner = self.expansion * self.embed_dim
        if inner % self.head_dim != 0:
            raise ConfigError(
                f"expansion*embed_dim ({inner}) must be divisible by head_dim {self.head_dim}"
            )
        if self.degree < 0:
            raise ConfigError(f"degree must be >= 0, got {self.degree}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.h // self.patch[0], self.w // self.patch[1], self.d // self.patch[2])

    @property
    def num_tokens(self) -> int:
        gh, gw, gd = self.grid
        return gh * gw * gd

    @property
    def inner_dim(self) -> int:
        return self.expansion * self.embed_dim

    def decoder_stages(self) -> int:
        """Number of two-fold upsamplings from patch grid to full resolution."""
        p = self.patch[0]
        if self.patch != (p, p, p) or p & (p - 1) or p < 2:
            raise ConfigError(
                f"the decoder requires an isotropic power-of-two patch, got {self.patch}"
            )
        return int(math.log2(p))


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    smooth: float = 1e-5

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.dice_weight == 0 and self.ce_weight == 0:
            raise ConfigError("at least one loss weight must be positive")


# ---------------------------------------------------------------------------
# flat key=value run configuration
# ---------------------------------------------------------------------------

# key -> (default, parser, doc)
CONFIG_KEYS: dict[str, tuple] = {
    "model.h": (32, int, "volume height in voxels"),
    "model.w": (32, int, "volume width in voxels"),
    "model.d": (32, int, "volume depth in voxels"),
    "model.in_channels": (1, int, "input channels"),
    "model.patch": ("8", str, "patch size: one int or 'h,w,d'"),
    "model.embed_dim": (32, int, "token embedding width K (constant over depth)"),
    "model.depth": (4, int, "number of encoder blocks (alternating directions)"),
    "model.taps": ("", str, "comma list of tap block indices; empty = 4 even taps"),
    "model.head_dim": (16, int, "memory head dimension d"),
    "model.expansion": (2, int, "up-projection expansion factor e"),
    "model.projection": ("chebyshev", str, "chebyshev|bspline|rbf|mlp|linear"),
    "model.degree": (4, int, "Chebyshev polynomial degree"),
    "model.classes": (3, int, "segmentation classes incl. background"),
    "loss.dice": (1.0, float, "soft-Dice loss weight"),
    "loss.ce": (1.0, float, "cross-entropy loss weight"),
    "loss.smooth": (1e-5, float, "soft-Dice smoothing epsilon"),
    "opt.lr": (1e-4, float, "initial learning rate"),
    "opt.beta1": (0.9, float, "AdamW beta1"),
    "opt.beta2": (0.999, float, "AdamW beta2"),
    "opt.eps": (1e-8, float, "AdamW epsilon"),
    "opt.weight_decay": (0.01, float, "decoupled weight decay"),
    "sched.power": (0.9, float, "polynomial LR decay exponent"),
    "train.epochs": (50, int, "training epochs"),
    "train.batch": (4, int, "batch size"),
    "data.train": (16, int, "synthetic training volumes"),
    "data.val": (4, int, "synthetic validation volumes"),
    "seed": (7, int, "master seed"),
    "dtype": ("f32", str, "f32 or f64"),
    "out": ("", str, "output directory (usually given via --out)"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: default for k, (default, _, _) in CONFIG_KEYS.items()})

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls.defaults()
        if path is not None:
            text = Path(path).read_text()
            for lineno, raw in enumerate(text.splitlines(), 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
                key, value = (s.strip() for s in line.split("=", 1))
                cfg.set(key, value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = (s.strip() for s in item.split("=", 1))
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value) -> None:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        _, parser, _ = CONFIG_KEYS[key]
        try:
            self.values[key] = parser(value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {key}: {value!r} ({err})") from None

    def get(self, key: str):
        return self.values[key]

    def echo(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in CONFIG_KEYS]
        return "\n".join(lines) + "\n"

    # typed views --------------------------------------------------------

    def model_config(self) -> UNETVLConfig:
        v = self.values
        try:
            return UNETVLConfig(
                h=v["model.h"],
                w=v["model.w"],
                d=v["model.d"],
                in_channels=v["model.in_channels"],
                patch=_parse_extent(v["model.patch"]),
                embed_dim=v["model.embed_dim"],
                depth=v["model.depth"],
                taps=_parse_taps(v["model.taps"]),
                head_dim=v["model.head_dim"],
                expansion=v["model.expansion"],
                projection=ProjectionKind.parse(v["model.projection"]),
                degree=v["model.degree"],
                num_classes=v["model.classes"],
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(dice_weight=v["loss.dice"], ce_weight=v["loss.ce"], smooth=v["loss.smooth"])

    @property
    def dtype(self) -> str:
        d = self.values["dtype"]
        if d not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {d!r}")
        return d

    @property
    def seed(self) -> int:
        return self.values["seed"]


def config_key_docs() -> str:
    width = max(len(k) for k in CONFIG_KEYS)
    lines = []
    for key, (default, _, doc) in CONFIG_KEYS.items():
        lines.append(f"{key.ljust(width)}  default={default!r:<12} {doc}")
    return "\n".join(lines) + "\n"
