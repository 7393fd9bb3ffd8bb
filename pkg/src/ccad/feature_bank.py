"""Global feature space extraction and greedy coreset compression.

Row order of every feature matrix is (image, patch row, patch col), i.e.
image-major then row-major over the ``H//m x W//m`` patch grid.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

BANK_MAGIC = b"CCADBNK1"
BANK_VERSION = 1


class BankDecodeError(ValueError):
    pass


class BadMagicError(BankDecodeError):
    pass


class VersionMismatchError(BankDecodeError):
    pass


class TruncatedBankError(BankDecodeError):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "seeded-conv"
    seed: int = 0
    layer_spec: tuple[int, ...] = (1, 2)
    d: int = 64
    m: int = 4
    widths: tuple[int, ...] = (16, 32, 64)
    imported_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "layer_spec", tuple(self.layer_spec))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.kind not in ("seeded-conv", "imported"):
            raise ValueError(f"kind: unknown extractor kind {self.kind!r}")
        if self.kind == "imported" and not self.imported_path:
            raise ValueError("imported_path: required for kind='imported'")
        if self.kind == "seeded-conv":
            if not self.layer_spec or min(self.layer_spec) < 0 or max(self.layer_spec) >= len(self.widths):
                raise ValueError(f"layer_spec: indices must lie in [0, {len(self.widths)})")
            if self.m < 1 or self.m & (self.m - 1):
                raise ValueError(f"m: must be a power of two, got {self.m}")

    def fingerprint(self) -> str:
        payload = json.dumps({k: v for k, v in self.__dict__.items()}, sort_keys=True, default=list)
        if self.kind == "imported":
            payload += hashlib.sha256(Path(self.imported_path).read_bytes()).hexdigest()
        return f"{self.kind}:{hashlib.sha256(payload.encode()).hexdigest()[:16]}"


class SeededConvEncoder(nn.Module):
    """Frozen random conv stack; stage ``i`` has stride ``2**(i+1)``."""

    def __init__(self, widths=(16, 32, 64), in_ch: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        prev = in_ch
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (prev * 9)) ** 0.5)
                conv.bias.zero_()
            self.stages.append(conv)
            prev = w
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.stages:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


_ENCODERS: dict[tuple, SeededConvEncoder] = {}


def get_encoder(cfg: ExtractorConfig, in_ch: int = 3) -> SeededConvEncoder:
    key = (cfg.widths, in_ch, cfg.seed)
    if key not in _ENCODERS:
        _ENCODERS[key] = SeededConvEncoder(cfg.widths, in_ch, cfg.seed).double()
    return _ENCODERS[key]


def _projection(cfg: ExtractorConfig, d_in: int) -> torch.Tensor | None:
    if d_in == cfg.d:
        return None
    gen = torch.Generator().manual_seed(cfg.seed + 7919)
    return torch.randn(d_in, cfg.d, generator=gen, dtype=torch.float64) / d_in**0.5


def _to_nchw(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    if x.ndim != 4:
        raise ValueError(f"images: expected N x H x W x C, got shape {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


def feature_maps(images, cfg: ExtractorConfig) -> torch.Tensor:
    """Patch features as an ``N x h x w x d`` float64 tensor with h = H//m."""
    if len(images) == 0:
        raise ValueError("images: empty batch")
    shapes = {tuple(np.shape(im)) for im in images}
    if len(shapes) > 1:
        raise ValueError(f"images: inconsistent shapes {sorted(shapes)}")
    if cfg.kind == "imported":
        return _imported_maps(images, cfg)
    x = _to_nchw(np.stack([np.asarray(im) for im in images]))
    _, _, H, W = x.shape
    h, w = H // cfg.m, W // cfg.m
    if h == 0 or w == 0:
        raise ValueError(f"m: downsampling ratio {cfg.m} exceeds image size {H}x{W}")
    feats = get_encoder(cfg, x.shape[1])(x)
    parts = []
    for i in cfg.layer_spec:
        f = feats[i]
        if f.shape[-2:] != (h, w):
            f = F.interpolate(f, size=(h, w), mode="bilinear", align_corners=False) if f.shape[-2] < h \
                else F.adaptive_avg_pool2d(f, (h, w))
        parts.append(f)
    out = torch.cat(parts, dim=1).permute(0, 2, 3, 1)
    proj = _projection(cfg, out.shape[-1])
    return out if proj is None else out @ proj


def _imported_maps(images, cfg: ExtractorConfig) -> torch.Tensor:
    # images are integer indices into the imported N x h x w x d array
    table = np.load(cfg.imported_path)
    if table.ndim != 4 or table.shape[-1] != cfg.d:
        raise ValueError(f"imported features: expected N x h x w x {cfg.d}, got {table.shape}")
    idx = [int(np.asarray(i).reshape(-1)[0]) for i in images]
    return torch.as_tensor(table[idx], dtype=torch.float64)


@dataclass(frozen=True)
class GlobalFeatureSpace:
    vectors: np.ndarray
    meta: np.ndarray  # M x 3 int: image_index, row, col
    m: int
    N: int
    H: int
    W: int
    fingerprint: str = ""

    @property
    def M(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def extract_features(images, cfg: ExtractorConfig) -> GlobalFeatureSpace:
    maps = feature_maps(images, cfg).numpy()
    N, h, w, d = maps.shape
    if cfg.kind == "imported":
        H, W = h * cfg.m, w * cfg.m
    else:
        H, W = np.shape(images[0])[:2]
    n, r, c = np.meshgrid(np.arange(N), np.arange(h), np.arange(w), indexing="ij")
    meta = np.stack([n.ravel(), r.ravel(), c.ravel()], axis=1)
    return GlobalFeatureSpace(maps.reshape(N * h * w, d), meta, cfg.m, N, int(H), int(W), cfg.fingerprint())


@dataclass(frozen=True)
class CoarseFeatureBank:
    vectors: np.ndarray
    source_ids: np.ndarray
    extractor_fingerprint: str = ""
    source_M: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def xi(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, CoarseFeatureBank):
            return NotImplemented
        return (self.extractor_fingerprint == other.extractor_fingerprint
                and self.source_M == other.source_M
                and np.array_equal(self.source_ids, other.source_ids)
                and self.vectors.dtype == other.vectors.dtype
                and np.array_equal(self.vectors, other.vectors))


def greedy_coreset_indices(X: np.ndarray, k: int, init: str = "max-norm") -> list[int]:
    """Farthest-point selection; ties go to the lowest row index (argmax semantics)."""
    X = np.asarray(X, dtype=np.float64)
    if init == "max-norm":
        first = int(np.argmax(np.einsum("ij,ij->i", X, X)))
    elif init == "index":
        first = 0
    else:
        raise ValueError(f"init: unknown rule {init!r}")
    selected = [first]
    min_d = np.linalg.norm(X - X[first], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d))
        selected.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(X - X[nxt], axis=1))
    return selected


def coreset_compress(space: GlobalFeatureSpace, xi: int, init: str = "max-norm") -> CoarseFeatureBank:
    if xi < 1:
        raise ValueError(f"xi: must be >= 1, got {xi}")
    warnings = ()
    if xi > space.M:
        msg = f"requested xi={xi} exceeds M={space.M}; clamped"
        logger.warning(msg)
        warnings = (msg,)
        xi = space.M
    ids = np.array(greedy_coreset_indices(space.vectors, xi, init), dtype=np.uint64)
    vectors = np.ascontiguousarray(space.vectors[ids.astype(np.int64)], dtype=np.float32)
    return CoarseFeatureBank(vectors, ids, space.fingerprint, space.M, warnings)


def empty_bank(d: int, fingerprint: str = "") -> CoarseFeatureBank:
    """A zero-row bank, used to ablate global conditioning."""
    return CoarseFeatureBank(np.zeros((0, d), np.float32), np.zeros(0, np.uint64), fingerprint, 0)


def coverage_radius(X: np.ndarray, selected) -> float:
    X = np.asarray(X, dtype=np.float64)
    d = np.linalg.norm(X[:, None, :] - X[list(selected)][None, :, :], axis=-1)
    return float(d.min(axis=1).max())


def encode_bank(bank: CoarseFeatureBank) -> bytes:
    fp = bank.extractor_fingerprint.encode("utf-8")
    header = BANK_MAGIC + struct.pack("<IIIQ", BANK_VERSION, bank.xi, bank.d, bank.source_M)
    header += struct.pack("<H", len(fp)) + fp
    body = np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes()
    body += np.ascontiguousarray(bank.source_ids, dtype="<u8").tobytes()
    return header + body


def decode_bank(buf: bytes) -> CoarseFeatureBank:
    if buf[:8] != BANK_MAGIC:
        raise BadMagicError(f"bad magic {buf[:8]!r}, expected {BANK_MAGIC!r}")
    fixed = 8 + struct.calcsize("<IIIQ") + 2
    if len(buf) < fixed:
        raise TruncatedBankError("header truncated")
    version, xi, d, M = struct.unpack_from("<IIIQ", buf, 8)
    if version != BANK_VERSION:
        raise VersionMismatchError(f"bank version {version}, expected {BANK_VERSION}")
    (fp_len,) = struct.unpack_from("<H", buf, fixed - 2)
    off = fixed + fp_len
    need = off + 4 * xi * d + 8 * xi
    if len(buf) != need:
        raise TruncatedBankError(f"payload is {len(buf)} bytes, expected {need}")
    fp = buf[fixed:off].decode("utf-8")
    vectors = np.frombuffer(buf, dtype="<f4", count=xi * d, offset=off).reshape(xi, d).astype(np.float32)
    ids = np.frombuffer(buf, dtype="<u8", count=xi, offset=off + 4 * xi * d).astype(np.uint64)
    return CoarseFeatureBank(vectors, ids, fp, M)


def save_bank(bank: CoarseFeatureBank, path) -> None:
    Path(path).write_bytes(encode_bank(bank))


def load_bank(path) -> CoarseFeatureBank:
    return decode_bank(Path(path).read_bytes())
