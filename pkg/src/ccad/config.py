"""Run configuration: one flat key namespace, read from TOML or JSON.

Every key is a field of :class:`RunConfig`. Unknown keys are rejected so a
typo never silently falls back to a default. ``None`` for the variant-tuned
keys (``widths``, ``batch_size``, ``learning_rate``, ``optimizer``) means "use
the variant's default".
"""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import tomli

from .backbone import LatentCodec
from .data import SynthSpec
from .feature_bank import ExtractorConfig
from .fine_compression import ConfigurationError
from .training import TrainConfig

DEFAULT_WIDTHS = {"V": [16, 32, 64, 64], "C": [32, 64, 64], "F": [32, 64, 64]}


class ConfigError(ConfigurationError):
    pass


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    category: str = "synthetic"
    out_dir: str = "run"
    bank_path: str | None = None  # default <out_dir>/bank.ccadbnk
    checkpoint_path: str | None = None  # default <out_dir>/model.ckpt
    image_size: int | None = None

    # synthetic data
    synth_seed: int = 0
    synth_n_train: int = 32
    synth_n_test_good: int = 16
    synth_n_test_defect: int = 16
    synth_size: int = 32
    synth_texture: str = "checker"
    synth_defect: str = "square"
    synth_intensity: float = 0.6

    # global feature extractor and coarse bank
    extractor_kind: str = "seeded-conv"
    extractor_seed: int = 0
    extractor_layers: list[int] = None
    extractor_d: int = 64
    extractor_m: int = 4
    extractor_widths: list[int] = None
    extractor_path: str | None = None
    xi: int = 200
    coreset_init: str = "max-norm"
    mask_suffix: str = "_mask"

    # fine compression module
    fcm_d_k: int = 64
    fcm_heads: int = 4

    # denoiser
    variant: str = "V"
    widths: list[int] | None = None
    heads: int = 4
    codec: str = "tiny-conv-ae"
    codec_latent_ch: int = 8
    codec_steps: int = 1500

    # training
    seed: int = 0
    steps: int | None = 2000
    epochs: int = 1
    batch_size: int | None = None
    learning_rate: float | None = None
    weight_decay: float = 0.05
    optimizer: str | None = None
    grad_clip: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 0.0

    # reconstruction
    guidance_w: float = 2.0
    inference_steps: int = 10
    recon_chunk: int = 16

    # scoring
    psi_seed: int = 1
    psi_layers: list[int] = None
    psi_sigma: list[float] = None
    smooth_sigma: float = 4.0

    def __post_init__(self):
        if self.extractor_layers is None:
            self.extractor_layers = [1, 2]
        if self.extractor_widths is None:
            self.extractor_widths = [16, 32, 64]
        if self.psi_layers is None:
            self.psi_layers = [0, 1]
        if self.psi_sigma is None:
            self.psi_sigma = [1.0, 1.0]
        self.validate()

    def validate(self) -> None:
        self.variant = str(self.variant).upper()
        if self.variant not in ("V", "C", "F"):
            raise ConfigError(f"variant: expected V, C or F, got {self.variant!r}")
        if self.xi < 0:
            raise ConfigError("xi: must be >= 0 (0 builds an empty bank)")
        if len(self.psi_layers) != len(self.psi_sigma):
            raise ConfigError("psi_sigma: needs one weight per entry of psi_layers")
        if self.codec not in ("identity", "tiny-conv-ae"):
            raise ConfigError(f"codec: expected identity or tiny-conv-ae, got {self.codec!r}")
        if self.inference_steps < 1 or self.inference_steps > self.T:
            raise ConfigError(f"inference_steps: must lie in [1, T={self.T}]")
        if self.recon_chunk < 1:
            raise ConfigError("recon_chunk: must be >= 1")
        try:
            self.synth_spec()
            self.extractor()
            self.train_config()
        except ConfigurationError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- derived objects ---------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def bank_file(self) -> Path:
        return Path(self.bank_path) if self.bank_path else self.out / "bank.ccadbnk"

    @property
    def checkpoint_file(self) -> Path:
        return Path(self.checkpoint_path) if self.checkpoint_path else self.out / "model.ckpt"

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(seed=self.synth_seed, n_train=self.synth_n_train, n_test_good=self.synth_n_test_good,
                         n_test_defect=self.synth_n_test_defect, size=self.synth_size,
                         texture=self.synth_texture, defect=self.synth_defect,
                         defect_intensity=self.synth_intensity, category=self.category)

    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(kind=self.extractor_kind, seed=self.extractor_seed,
                               layer_spec=tuple(self.extractor_layers), d=self.extractor_d, m=self.extractor_m,
                               widths=tuple(self.extractor_widths), imported_path=self.extractor_path)

    def psi(self) -> ExtractorConfig:
        return ExtractorConfig(seed=self.psi_seed)

    def model_widths(self) -> list[int]:
        return list(self.widths) if self.widths else DEFAULT_WIDTHS[self.variant]

    def train_config(self) -> TrainConfig:
        overrides = {k: getattr(self, k) for k in ("batch_size", "learning_rate", "optimizer")
                     if getattr(self, k) is not None}
        return TrainConfig.for_variant(
            self.variant, epochs=self.epochs, steps=self.steps, weight_decay=self.weight_decay, seed=self.seed,
            T=self.T, beta_start=self.beta_start, beta_end=self.beta_end, eta=self.eta,
            guidance_w=self.guidance_w, inference_steps=self.inference_steps, grad_clip=self.grad_clip,
            **overrides)

    def make_codec(self, image_ch: int = 3) -> LatentCodec | None:
        if self.variant == "V":
            return None
        return LatentCodec(self.codec, in_ch=image_ch, latent_ch=self.codec_latent_ch, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


# -- parsing ----------------------------------------------------------------------

_HINTS = None


def _hints() -> dict:
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(RunConfig)
    return _HINTS


def _coerce(key: str, value):
    hint = _hints()[key]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    optional = type(None) in typing.get_args(hint)
    base = args[0] if optional and args else hint
    if value is None:
        if optional or typing.get_origin(base) is list:
            return None
        raise ConfigError(f"{key}: may not be null")
    if typing.get_origin(base) is list:
        (item,) = typing.get_args(base)
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_scalar(key, item, v) for v in value]
    return _scalar(key, base, value)


def _scalar(key, typ, value):
    try:
        if typ is bool:
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            if isinstance(value, bool):
                raise ValueError
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def from_mapping(mapping: dict, base: RunConfig | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in mapping.items()}
    if base is None:
        return RunConfig(**values)
    return replace(base, **values)


def parse_text(text: str, suffix: str = "") -> dict:
    suffix = suffix.lower()
    if suffix == ".json" or (not suffix and text.lstrip().startswith("{")):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON ({e})") from None
    else:
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config: invalid TOML ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a table/object")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config: keys are flat, found table(s) {', '.join(nested)}")
    return data


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    mapping = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: no such file {p}")
        mapping = parse_text(p.read_text(encoding="utf-8"), p.suffix)
    mapping.update(overrides or {})
    return from_mapping(mapping)


def parse_override(item: str) -> tuple[str, object]:
    """``key=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip().replace("-", "_")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value
