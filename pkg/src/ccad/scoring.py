"""Anomaly maps from multi-layer feature cosine dissimilarity, and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from scipy.stats import rankdata

from .feature_bank import ExtractorConfig, get_encoder

COS_EPS = 1e-8


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalyMap:
    values: np.ndarray
    layer_count: int
    sigma_l: tuple[float, ...]

    @property
    def upper_bound(self) -> float:
        return 2.0 * float(sum(self.sigma_l))


def psi_features(images, psi: ExtractorConfig, layers) -> list[torch.Tensor]:
    """Per-layer ``(N, C_l, h_l, w_l)`` maps of the seeded encoder for N x H x W x C images."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float64).permute(0, 3, 1, 2)
    feats = get_encoder(psi, x.shape[1])(x)
    return [feats[l] for l in layers]


def cosine_dissimilarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos along dim 1. Two dead vectors score 0; one dead vector scores 1."""
    na, nb = a.norm(dim=1), b.norm(dim=1)
    cos = (a * b).sum(dim=1) / (na * nb).clamp_min(COS_EPS)
    out = 1.0 - cos
    both_dead = (na < COS_EPS) & (nb < COS_EPS)
    return torch.where(both_dead, torch.zeros_like(out), out).clamp(0.0, 2.0)


def anomaly_maps(x0, x0_hat, psi, layers, sigma_l) -> np.ndarray:
    """Batched anomaly maps, ``(N, H, W)``.

    ``psi`` is an ExtractorConfig (seeded encoder) or a callable mapping an
    N x H x W x C batch to a list of per-layer ``(N, C, h, w)`` feature maps.
    """
    x0, x0_hat = np.asarray(x0), np.asarray(x0_hat)
    if x0.shape != x0_hat.shape:
        raise ValueError(f"image shapes differ: {x0.shape} vs {x0_hat.shape}")
    if len(layers) != len(sigma_l):
        raise ValueError(f"{len(layers)} layers but {len(sigma_l)} sigma_l factors")
    N, H, W = x0.shape[:3]
    if callable(psi):
        fa, fb = psi(x0), psi(x0_hat)
    else:
        fa, fb = psi_features(x0, psi, layers), psi_features(x0_hat, psi, layers)
    total = torch.zeros(N, 1, H, W, dtype=torch.float64)
    for a, b, s in zip(fa, fb, sigma_l):
        a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
        d = cosine_dissimilarity(a, b)[:, None]
        if d.shape[-2:] != (H, W):
            d = F.interpolate(d, size=(H, W), mode="bilinear", align_corners=False)
        total += s * d
    return total[:, 0].numpy()


def anomaly_map(x0, x0_hat, psi, layers, sigma_l) -> AnomalyMap:
    """Map for a single H x W x C image pair."""
    values = anomaly_maps(np.asarray(x0)[None], np.asarray(x0_hat)[None], psi, layers, sigma_l)[0]
    return AnomalyMap(values, len(layers), tuple(float(s) for s in sigma_l))


def image_score(amap, smooth_sigma: float = 4.0) -> float:
    """Max of the Gaussian-smoothed map (reflect borders, 4-sigma truncation)."""
    if smooth_sigma < 0:
        raise ValueError("smooth_sigma: must be >= 0")
    values = amap.values if isinstance(amap, AnomalyMap) else np.asarray(amap, dtype=np.float64)
    if smooth_sigma > 0:
        values = ndimage.gaussian_filter(values.astype(np.float64), smooth_sigma, mode="reflect", truncate=4.0)
    return float(values.max())


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("metric undefined: labels contain a single class")
    return scores, labels, n_pos


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic; ties count one half."""
    scores, labels, n_pos = _prepare(scores, labels)
    n_neg = labels.size - n_pos
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(scores, labels):
    """TP and predicted-positive counts for the rule score >= threshold, per distinct score (descending)."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    k = last + 1
    return tp, k


def f1_max(scores, labels) -> float:
    scores, labels, n_pos = _prepare(scores, labels)
    tp, k = _threshold_counts(scores, labels)
    f1 = 2.0 * tp / (2.0 * tp + (k - tp) + (n_pos - tp))
    return float(f1.max())


def average_precision(scores, labels) -> float:
    """Step-interpolated AP: sum over distinct thresholds of (R_i - R_{i-1}) * P_i."""
    scores, labels, n_pos = _prepare(scores, labels)
    tp, k = _threshold_counts(scores, labels)
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp / n_pos * (tp / k)))


@dataclass
class ScoreReport:
    image_scores: list[float]
    image_labels: list[int]
    class_auroc: float
    pixel_auroc: float
    class_f1_max: float
    pixel_f1_max: float
    class_ap: float
    pixel_ap: float
    image_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "metrics": {
                "class_auroc": self.class_auroc,
                "pixel_auroc": self.pixel_auroc,
                "class_f1_max": self.class_f1_max,
                "pixel_f1_max": self.pixel_f1_max,
                "class_ap": self.class_ap,
                "pixel_ap": self.pixel_ap,
            },
            "images": [{"name": n, "label": int(l), "score": float(s)}
                       for n, l, s in zip(self.image_names or [""] * len(self.image_scores),
                                          self.image_labels, self.image_scores)],
            "meta": self.meta,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        d = json.loads(text)
        m = d["metrics"]
        return cls([i["score"] for i in d["images"]], [i["label"] for i in d["images"]],
                   m["class_auroc"], m["pixel_auroc"], m["class_f1_max"], m["pixel_f1_max"],
                   m["class_ap"], m["pixel_ap"], [i["name"] for i in d["images"]], d.get("meta", {}))


def evaluate_maps(maps: np.ndarray, masks: np.ndarray, labels, smooth_sigma: float = 4.0,
                  names=None, meta=None) -> ScoreReport:
    """Class metrics from per-image scores, pixel metrics from flattened maps vs. masks."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = (np.asarray(masks) > 0.5).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    scores = np.array([image_score(m, smooth_sigma) for m in maps])
    flat_m, flat_y = maps.ravel(), masks.ravel()
    return ScoreReport(
        image_scores=[float(s) for s in scores],
        image_labels=[int(l) for l in labels],
        class_auroc=auroc(scores, labels),
        pixel_auroc=auroc(flat_m, flat_y),
        class_f1_max=f1_max(scores, labels),
        pixel_f1_max=f1_max(flat_m, flat_y),
        class_ap=average_precision(scores, labels),
        pixel_ap=average_precision(flat_m, flat_y),
        image_names=list(names or []),
        meta=dict(meta or {}),
    )


def save_map_png(values: np.ndarray, path, upper: float) -> None:
    """16-bit grayscale PNG, values mapped linearly from [0, upper] to [0, 65535]."""
    scaled = np.clip(np.asarray(values, dtype=np.float64) / upper, 0.0, 1.0)
    arr = np.round(scaled * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_map_png(path, upper: float) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0 * upper


def write_report(report: ScoreReport, path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")
