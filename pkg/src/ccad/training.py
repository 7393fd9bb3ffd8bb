"""Objectives, training loop and reconstruction samplers for CCAD(F/C/V).

A "denoiser" anywhere in this module is either a :class:`DenoiserModel` or a
plain callable ``fn(x_t, t, local_cond, bank_tokens) -> eps``; the latter is
how tests plug in analytic mock denoisers.

Reconstruction starts from pure Gaussian noise at step T and walks a strided
DDIM subsequence down to 0. For CCAD(F) at inference the batch-wise feature
space is built from the test image itself.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import schedules as sch
from .backbone import DenoiserModel, LatentCodec, denoise_eps
from .feature_bank import CoarseFeatureBank, ExtractorConfig, feature_maps
from .fine_compression import AttentionParams, ConfigurationError

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CCADCKPT"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass
class TrainConfig:
    variant: str = "V"
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.05
    optimizer: str = "adam"
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 0.0
    guidance_w: float = 1.0
    inference_steps: int = 10
    grad_clip: float = 1.0
    dump_dir: str | None = None

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "TrainConfig":
        variant = variant.upper()
        if variant == "V":
            base = dict(batch_size=32, learning_rate=3e-4, optimizer="adam")
        elif variant in ("F", "C"):
            base = dict(batch_size=12, learning_rate=1e-4, optimizer="adamw")
        else:
            raise ConfigurationError(f"variant: expected one of V, C, F, got {variant!r}")
        base.update(overrides)
        return cls(variant=variant, **base)

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in ("V", "C", "F"):
            raise ConfigurationError(f"variant: expected one of V, C, F, got {self.variant!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigurationError(f"optimizer: expected adam or adamw, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size: must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate and weight_decay must be >= 0")
        if self.guidance_w < 0:
            raise ConfigurationError("guidance_w: must be >= 0")

    def schedule(self) -> sch.NoiseSchedule:
        return sch.make_schedule(self.T, self.beta_start, self.beta_end, eta=self.eta)


@dataclass
class TrainState:
    step: int = 0
    losses: list[float] = field(default_factory=list)
    noise_rng_state: bytes | None = None
    params_ref: str | None = None


@dataclass
class Conditioning:
    """Everything besides the image batch that a variant's denoiser consumes."""

    variant: str
    bank: torch.Tensor
    fcm: AttentionParams | None = None
    encoder: ExtractorConfig | None = None
    codec: LatentCodec | None = None

    @classmethod
    def build(cls, variant: str, bank, fcm=None, encoder=None, codec=None) -> "Conditioning":
        variant = variant.upper()
        if bank is None:
            raise ConfigurationError(f"bank required for variant {variant}")
        if isinstance(bank, CoarseFeatureBank):
            if variant == "F" and encoder is not None and bank.xi and bank.extractor_fingerprint != encoder.fingerprint():
                raise ConfigurationError("encoder fingerprint does not match the bank's extractor")
            bank = bank.vectors
        bank = torch.as_tensor(np.asarray(bank) if not torch.is_tensor(bank) else bank, dtype=torch.float32)
        if variant == "F" and (fcm is None or encoder is None):
            raise ConfigurationError("variant F needs a fine compression module and its encoder config")
        if variant in ("F", "C") and codec is None:
            codec = LatentCodec("identity")
        return cls(variant, bank, fcm, encoder, codec)

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Bank tokens for a pixel batch: B_c rows, or per-image fine-bank rows for F."""
        if self.variant != "F":
            return self.bank
        dbs = batch_features(images, self.encoder).to(self.fcm.theta_Q.dtype)
        return self.fcm(dbs, self.bank.to(self.fcm.theta_Q.dtype))

    def to_latent(self, images: torch.Tensor) -> torch.Tensor:
        if self.variant == "V":
            return images
        with torch.no_grad():
            return self.codec.encode(images)

    def from_latent(self, z: torch.Tensor) -> torch.Tensor:
        return z if self.variant == "V" else self.codec.decode(z)


def batch_features(images: torch.Tensor, encoder: ExtractorConfig) -> torch.Tensor:
    """Per-image batch feature space, ``(B, zeta_per_image, d)``."""
    maps = feature_maps(images.detach().permute(0, 2, 3, 1).double().numpy(), encoder)
    return maps.flatten(1, 2).float()


def _eps(denoiser, x_t, t, local_cond, tokens):
    if isinstance(denoiser, DenoiserModel):
        return denoise_eps(denoiser, x_t, t, local_cond, tokens)
    return denoiser(x_t, t, local_cond, tokens)


def _sample_t_eps(x0: torch.Tensor, T: int, gen: torch.Generator):
    t = torch.randint(1, T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return t, eps


def _diffuse(x0, t, eps, s: sch.NoiseSchedule):
    a = torch.tensor(s.alpha_bar, dtype=x0.dtype)[t - 1].view(-1, *([1] * (x0.ndim - 1)))
    return a.sqrt() * x0 + (1 - a).sqrt() * eps


def loss_base(denoiser, x0: torch.Tensor, s: sch.NoiseSchedule, gen: torch.Generator,
              local_cond=None, tokens=None) -> torch.Tensor:
    """Mean squared error between the sampled noise and its prediction."""
    t, eps = _sample_t_eps(x0, s.T, gen)
    x_t = _diffuse(x0, t, eps, s)
    pred = _eps(denoiser, x_t, t, local_cond, tokens)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser output shape {tuple(pred.shape)} != input shape {tuple(eps.shape)}")
    return torch.mean((eps - pred.to(eps.dtype)) ** 2)


def loss_ccad_f(denoiser, images, bank, fcm, s, gen, encoder=None, codec=None, cond=None):
    cond = cond or Conditioning.build("F", bank, fcm, encoder, codec)
    return loss_base(denoiser, cond.to_latent(images), s, gen, local_cond=images, tokens=cond.tokens(images))


def loss_ccad_c(denoiser, images, bank, s, gen, codec=None, cond=None):
    cond = cond or Conditioning.build("C", bank, codec=codec)
    return loss_base(denoiser, cond.to_latent(images), s, gen, local_cond=images, tokens=cond.bank)


def loss_ccad_v(denoiser, images, bank, s, gen, cond=None):
    cond = cond or Conditioning.build("V", bank)
    return loss_base(denoiser, images, s, gen, tokens=cond.bank)


def variant_loss(denoiser, images, cond: Conditioning, s, gen):
    if cond.variant == "F":
        return loss_ccad_f(denoiser, images, None, None, s, gen, cond=cond)
    if cond.variant == "C":
        return loss_ccad_c(denoiser, images, None, s, gen, cond=cond)
    return loss_ccad_v(denoiser, images, None, s, gen, cond=cond)


def trainable_parameters(model: DenoiserModel, cond: Conditioning) -> list[torch.nn.Parameter]:
    params = model.trainable_parameters()
    if cond.fcm is not None:
        params += list(cond.fcm.parameters())
    return params


def train(variant: str, data: torch.Tensor, bank, config: TrainConfig, model: DenoiserModel | None = None,
          fcm: AttentionParams | None = None, encoder: ExtractorConfig | None = None,
          codec: LatentCodec | None = None, widths=None, log_every: int = 0):
    """Minimise the variant objective over ``data`` (N, C, H, W) in [-1, 1].

    Returns ``(model, state, cond)``. Noise draws come from a torch generator
    seeded with ``config.seed``; batch order from a separate numpy generator.
    """
    if config.variant != variant.upper():
        raise ConfigurationError(f"config variant {config.variant} != requested variant {variant}")
    if data is None or len(data) == 0:
        raise ConfigurationError("data: training set is empty")
    cond = Conditioning.build(variant, bank, fcm, encoder, codec)
    if model is None:
        in_ch = data.shape[1] if variant.upper() == "V" else cond.codec.latent_ch
        model = DenoiserModel(variant, in_ch=in_ch, bank_dim=cond.bank.shape[-1], widths=widths,
                              image_ch=data.shape[1], hint_factor=cond.codec.factor if cond.codec else 1,
                              seed=config.seed)
    if model.variant != cond.variant:
        raise ConfigurationError(f"model variant {model.variant} != {cond.variant}")
    s = config.schedule()
    params = trainable_parameters(model, cond)
    opt_cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    opt = opt_cls(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    noise_gen = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed + 1)
    n = data.shape[0]
    bs = min(config.batch_size, n)
    steps = config.steps if config.steps is not None else config.epochs * math.ceil(n / bs)
    state = TrainState()
    model.train()
    perm, pos = order_rng.permutation(n), 0
    for step in range(steps):
        if pos + bs > n:
            perm, pos = order_rng.permutation(n), 0
        batch = data[torch.as_tensor(perm[pos:pos + bs])]
        pos += bs
        loss = variant_loss(model, batch, cond, s, noise_gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            dump = {"step": step, "loss": value, "recent_losses": state.losses[-20:],
                    "config": asdict(config)}
            if config.dump_dir:
                Path(config.dump_dir).mkdir(parents=True, exist_ok=True)
                Path(config.dump_dir, "divergence.json").write_text(json.dumps(dump, indent=2))
            raise TrainingDiverged(f"non-finite loss at step {step}", dump)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        state.losses.append(value)
        state.step += 1
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.4f", step, value)
    model.eval()
    state.noise_rng_state = bytes(noise_gen.get_state().numpy())
    return model, state, cond


def _noise(shape, seeds, dtype=torch.float32) -> torch.Tensor:
    """One independent stream per image so results don't depend on batching."""
    return torch.stack([torch.randn(shape, generator=torch.Generator().manual_seed(int(sd)), dtype=dtype)
                        for sd in seeds])


def _seeds(n: int, seed: int, seeds):
    return list(seeds) if seeds is not None else [seed * 100003 + i for i in range(n)]


def _sample(eps_fn, x_T, s: sch.NoiseSchedule, steps: int, noise_seeds):
    ts = sch.strided_timesteps(s.T, steps)
    gens = [torch.Generator().manual_seed(int(sd) + 1) for sd in noise_seeds]
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = eps_fn(x, t)
        fresh = None
        if s.sigma(t, t_prev) > 0:
            fresh = torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in gens])
        x = sch.ddim_step(x, eps, t, s, fresh, t_prev=t_prev)
    return x


@torch.no_grad()
def reconstruct_fc(denoiser, x_test: torch.Tensor, bank, fcm_or_none, s: sch.NoiseSchedule, steps: int,
                   codec: LatentCodec | None = None, encoder: ExtractorConfig | None = None, seed: int = 0,
                   noise_seeds=None, cond: Conditioning | None = None) -> torch.Tensor:
    """Reconstruct F/C test images from pure latent noise, conditioned on x_test and the bank."""
    if steps > s.T:
        raise sch.ScheduleError(f"steps: {steps} exceeds T={s.T}")
    if cond is None:
        variant = "F" if fcm_or_none is not None else "C"
        cond = Conditioning.build(variant, bank, fcm_or_none, encoder, codec)
    tokens = cond.tokens(x_test)
    z_shape = cond.to_latent(x_test[:1]).shape[1:]
    seeds = _seeds(x_test.shape[0], seed, noise_seeds)
    z_T = _noise(z_shape, seeds, x_test.dtype)
    z0 = _sample(lambda z, t: _eps(denoiser, z, t, x_test, tokens), z_T, s, steps, seeds)
    return cond.from_latent(z0)


@torch.no_grad()
def reconstruct_v(denoiser, xbar0_target: torch.Tensor, bank, s: sch.NoiseSchedule, w: float, steps: int,
                  seed: int = 0, noise_seeds=None) -> torch.Tensor:
    """Target-guided pixel-space reconstruction starting from pure noise."""
    if steps > s.T:
        raise sch.ScheduleError(f"steps: {steps} exceeds T={s.T}")
    tokens = Conditioning.build("V", bank).bank
    seeds = _seeds(xbar0_target.shape[0], seed, noise_seeds)
    x_T = _noise(xbar0_target.shape[1:], seeds, xbar0_target.dtype)

    def eps_fn(x_t, t):
        eps = _eps(denoiser, x_t, t, None, tokens).to(x_t.dtype)
        xbar_t = sch.target_forward(xbar0_target, eps, t, s)
        return sch.guided_epsilon(eps, x_t, xbar_t, w, t, s)

    return _sample(eps_fn, x_T, s, steps, seeds)


# -- checkpoints ---------------------------------------------------------------

def _named_tensors(modules: dict[str, torch.nn.Module | None]):
    for prefix, mod in modules.items():
        if mod is None:
            continue
        for name, tensor in mod.state_dict().items():
            yield f"{prefix}.{name}", tensor


def save_checkpoint(path, variant: str, config_echo: dict, modules: dict[str, torch.nn.Module | None]) -> None:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    out += variant.upper().encode("ascii")[:1]
    cfg = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    tensors = list(_named_tensors(modules))
    out += struct.pack("<I", len(tensors))
    for name, t in tensors:
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> tuple[str, dict, dict[str, torch.Tensor]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    variant = buf[12:13].decode("ascii")
    (clen,) = struct.unpack_from("<I", buf, 13)
    off = 17
    config = json.loads(buf[off:off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return variant, config, tensors


def load_into(module: torch.nn.Module, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
    state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(state)


def config_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}
