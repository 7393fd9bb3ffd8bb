"""MVTec-layout ingestion and a synthetic textured-defect dataset generator.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png          (defect "good" has no masks)
    <root>/<category>/ground_truth/<defect>/<stem><mask_suffix>.png

Pixels load as float32 in [-1, 1], channels last; masks binarize at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class TestItem:
    path: Path
    defect: str
    mask_path: Path | None

    @property
    def label(self) -> int:
        return 0 if self.defect == "good" else 1


@dataclass
class CategoryManifest:
    name: str
    train: list[Path]
    test: list[TestItem]


@dataclass
class DatasetManifest:
    root: Path
    categories: dict[str, CategoryManifest] = field(default_factory=dict)
    image_size: tuple[int, int] | None = None

    def __getitem__(self, name: str) -> CategoryManifest:
        return self.categories[name]


def _images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS) if d.is_dir() else []


def ingest(root, layout: str = "mvtec", categories=None, mask_suffix: str = "_mask") -> DatasetManifest:
    if layout != "mvtec":
        raise IngestError(f"layout: unsupported {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"{root}: dataset root does not exist")
    names = categories or sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise IngestError(f"{root}: no categories found")
    manifest = DatasetManifest(root)
    orphans, sizes = [], set()
    for name in names:
        cat = root / name
        train = _images(cat / "train" / "good")
        if not train:
            raise IngestError(f"{cat}: no nominal training images under train/good")
        test = []
        test_dir = cat / "test"
        defects = sorted(p.name for p in test_dir.iterdir() if p.is_dir()) if test_dir.is_dir() else []
        for defect in defects:
            for img in _images(test_dir / defect):
                mask = None
                if defect != "good":
                    hits = sorted((cat / "ground_truth" / defect).glob(f"{img.stem}{mask_suffix}.*"))
                    if not hits:
                        orphans.append(str(img))
                        continue
                    mask = hits[0]
                    with Image.open(img) as a, Image.open(mask) as b:
                        if a.size != b.size:
                            raise IngestError(f"{mask}: mask size {b.size} != image size {a.size}")
                test.append(TestItem(img, defect, mask))
        if not test and not orphans:
            raise IngestError(f"{cat}: no test images")
        for p in train[:1] + [t.path for t in test[:1]]:
            with Image.open(p) as im:
                sizes.add(im.size)
        manifest.categories[name] = CategoryManifest(name, train, test)
    if orphans:
        raise IngestError("defective test images without masks: " + ", ".join(orphans))
    if len(sizes) == 1:
        w, h = sizes.pop()
        manifest.image_size = (h, w)
    return manifest


def load_image(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 127.5 - 1.0


def load_mask(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return (np.asarray(im, dtype=np.float32) / 255.0 > 0.5).astype(np.float32)


def load_split(cat: CategoryManifest, size: int | None = None):
    """Returns train images, test images, test masks, test labels, test names."""
    train = np.stack([load_image(p, size) for p in cat.train])
    test = np.stack([load_image(t.path, size) for t in cat.test])
    H, W = test.shape[1:3]
    masks = np.stack([load_mask(t.mask_path, size) if t.mask_path else np.zeros((H, W), np.float32)
                      for t in cat.test])
    labels = np.array([t.label for t in cat.test], dtype=np.int64)
    names = [f"{t.defect}/{t.path.name}" for t in cat.test]
    return train, test, masks, labels, names


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_train: int = 32
    n_test_good: int = 16
    n_test_defect: int = 16
    size: int = 32
    texture: str = "checker"
    defect: str = "square"
    defect_intensity: float = 0.6
    category: str = "synthetic"

    def __post_init__(self):
        if self.texture not in ("checker", "bands"):
            raise ValueError(f"texture: expected checker or bands, got {self.texture!r}")
        if self.defect not in ("square", "scratch", "blob"):
            raise ValueError(f"defect: expected square, scratch or blob, got {self.defect!r}")
        if self.size < 8:
            raise ValueError("size: must be >= 8")
        if not 0 <= self.defect_intensity <= 1:
            raise ValueError("defect_intensity: must lie in [0, 1]")


def make_texture(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Nominal grayscale texture in roughly [-0.6, 0.6]."""
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n]
    if spec.texture == "checker":
        period = max(n // 4, 2)
        oy, ox = rng.integers(0, period, size=2)
        tex = np.where(((yy + oy) // (period // 2) + (xx + ox) // (period // 2)) % 2 == 0, 0.5, -0.5)
    else:
        theta = rng.uniform(0, np.pi)
        freq = 2 * np.pi / max(n / 4, 2)
        phase = rng.uniform(0, 2 * np.pi)
        coord = xx * np.cos(theta) + yy * np.sin(theta)
        tex = 0.5 * np.sin(freq * coord + phase + 0.6 * np.sin(0.5 * freq * coord))
    tex = tex * rng.uniform(0.9, 1.1) + rng.normal(0, 0.03, size=(n, n))
    return tex.astype(np.float64)


def make_defect_mask(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n]
    lo, hi = max(n // 8, 2), max(n // 4, 3)
    if spec.defect == "square":
        s = int(rng.integers(lo, hi + 1))
        y, x = rng.integers(0, n - s + 1, size=2)
        mask = (yy >= y) & (yy < y + s) & (xx >= x) & (xx < x + s)
    elif spec.defect == "scratch":
        y0, x0, y1, x1 = rng.uniform(n * 0.15, n * 0.85, size=4)
        length = max(np.hypot(y1 - y0, x1 - x0), 1.0)
        dist = np.abs((y1 - y0) * (xx - x0) - (x1 - x0) * (yy - y0)) / length
        along = ((xx - x0) * (x1 - x0) + (yy - y0) * (y1 - y0)) / length
        mask = (dist <= 0.75) & (along >= 0) & (along <= length)
    else:
        cy, cx = rng.uniform(n * 0.2, n * 0.8, size=2)
        ry, rx = rng.uniform(lo / 2 + 0.5, hi / 2 + 1, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def inject_defect(tex: np.ndarray, mask: np.ndarray, intensity: float) -> np.ndarray:
    """Shift masked pixels by ``intensity`` toward whichever side of zero has room."""
    out = tex.copy()
    direction = np.where(tex[mask] >= 0, -1.0, 1.0)
    out[mask] = tex[mask] + direction * intensity
    return out


def _to_png(gray: np.ndarray) -> Image.Image:
    u8 = np.clip(np.round((gray + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Image.fromarray(np.repeat(u8[..., None], 3, axis=-1), mode="RGB")


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write an MVTec-layout tree for ``spec`` under ``out_dir``; deterministic in ``spec.seed``."""
    root = Path(out_dir)
    cat = root / spec.category
    dirs = {k: cat / k for k in ("train/good", "test/good", f"test/{spec.defect}", f"ground_truth/{spec.defect}")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    for i in range(spec.n_train):
        _to_png(make_texture(spec, rng)).save(dirs["train/good"] / f"{i:03d}.png")
    for i in range(spec.n_test_good):
        _to_png(make_texture(spec, rng)).save(dirs["test/good"] / f"{i:03d}.png")
    for i in range(spec.n_test_defect):
        tex = make_texture(spec, rng)
        mask = make_defect_mask(spec, rng)
        _to_png(inject_defect(tex, mask, spec.defect_intensity)).save(dirs[f"test/{spec.defect}"] / f"{i:03d}.png")
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
            dirs[f"ground_truth/{spec.defect}"] / f"{i:03d}_mask.png")
    return ingest(root, categories=[spec.category])
