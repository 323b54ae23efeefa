"""Dataset manifests, image loading and a built-in synthetic texture set."""
from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MANIFEST_COLUMNS = ("id", "path", "class", "split")


@dataclasses.dataclass(frozen=True)
class Record:
    image_id: str
    path: str  # relative to the manifest root
    label: str


@dataclasses.dataclass
class DatasetManifest:
    root: Path
    records: list[Record]
    split: str
    target_size: tuple[int, int] = (257, 257)

    def __post_init__(self):
        if self.split not in ("train", "eval"):
            raise ConfigError(f"split must be 'train' or 'eval', got {self.split!r}")
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate image ids in {self.split} manifest")

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def abspath(self, record: Record) -> Path:
        return self.root / record.path

    def save(self, path):
        h, w = self.target_size
        lines = [f"# root={self.root.resolve()}\ttarget_size={h}x{w}\tsplit={self.split}",
                 "\t".join(MANIFEST_COLUMNS)]
        lines += [f"{r.image_id}\t{r.path}\t{r.label}\t{self.split}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        try:
            meta = dict(field.split("=", 1) for field in lines[0].lstrip("# ").split("\t"))
            h, w = (int(v) for v in meta["target_size"].split("x"))
            if tuple(lines[1].split("\t")) != MANIFEST_COLUMNS:
                raise ValueError("bad column header")
            rows = [line.split("\t") for line in lines[2:] if line]
        except (IndexError, KeyError, ValueError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        split = meta.get("split", "train")
        if any(row[3] != split for row in rows):
            raise DataError(f"manifest {path} mixes splits")
        return cls(Path(meta["root"]), [Record(i, p, c) for i, p, c, _ in rows], split, (h, w))


def _class_files(root: Path) -> dict[str, list[Path]]:
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    classes = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        classes[d.name] = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not classes:
        raise DataError(f"no class subdirectories under {root}")
    return classes


def build_manifest(root, classes: Optional[Sequence[str]] = None, top_k: Optional[int] = None,
                   holdout_per_class: int = 10, seed: int = 0,
                   target_size: tuple[int, int] = (257, 257)) -> tuple[DatasetManifest, DatasetManifest]:
    """Select classes, hold out ``holdout_per_class`` images of each for evaluation.

    ``classes`` is an explicit whitelist; otherwise the ``top_k`` largest
    classes are used (ties broken by name), or all classes when both are None.
    """
    root = Path(root)
    files = _class_files(root)
    if classes is not None:
        missing = [c for c in classes if c not in files]
        if missing:
            raise DataError(f"classes not found under {root}: {missing}")
        chosen = list(classes)
    elif top_k is not None:
        if top_k < 1:
            raise ConfigError("top_k must be >= 1")
        chosen = sorted(files, key=lambda c: (-len(files[c]), c))[:top_k]
    else:
        chosen = list(files)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for name in sorted(chosen):
        paths = files[name]
        if not paths:
            raise DataError(f"class directory {root / name} contains no images")
        if holdout_per_class > len(paths):
            raise DataError(f"holdout {holdout_per_class} exceeds the {len(paths)} images of class {name!r}")
        order = rng.permutation(len(paths))
        for rank, idx in enumerate(order):
            p = paths[idx]
            rec = Record(f"{name}/{p.stem}", p.relative_to(root).as_posix(), name)
            (held if rank < holdout_per_class else train).append(rec)
    key = lambda r: r.image_id  # noqa: E731
    return (DatasetManifest(root, sorted(train, key=key), "train", tuple(target_size)),
            DatasetManifest(root, sorted(held, key=key), "eval", tuple(target_size)))


def to_unit_range(pixels: np.ndarray) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` -> float ``(3, H, W)`` in [-1, 1]."""
    return torch.from_numpy(pixels.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """float ``(3, H, W)`` in [-1, 1] -> uint8 ``(H, W, 3)``, rounded to nearest level."""
    arr = ((image.detach().double().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize with half-pixel centres; antialiased when shrinking."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    shrink = size[0] < image.shape[-2] or size[1] < image.shape[-1]
    out = F.interpolate(image[None], size=tuple(size), mode="bilinear", align_corners=False, antialias=shrink)
    return out[0].clamp(-1.0, 1.0)


def read_image(path) -> torch.Tensor:
    path = Path(path)
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return to_unit_range(pixels)


def load_image(path, target_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    img = read_image(path)
    return resize(img, target_size) if target_size else img


def save_image(path, image: torch.Tensor):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def load_manifest_images(manifest: DatasetManifest, on_error: str = "raise") -> tuple[list[str], torch.Tensor]:
    """Load every record at the manifest's target size, in manifest order."""
    ids, imgs = [], []
    for rec in manifest.records:
        try:
            imgs.append(load_image(manifest.abspath(rec), manifest.target_size))
        except DataError:
            if on_error != "skip":
                raise
            log.warning("skipping unreadable image %s", rec.path)
            continue
        ids.append(rec.image_id)
    if not imgs:
        raise DataError("no images could be loaded from the manifest")
    return ids, torch.stack(imgs)


# ---------------------------------------------------------------- synthetic textures

TEXTURE_KINDS = ("gradient", "stripes", "blobs")


def _grid(size: int):
    t = torch.linspace(-1.0, 1.0, size, dtype=torch.float64)
    return torch.meshgrid(t, t, indexing="ij")


def synthetic_texture(kind: str, size: int, rng: np.random.Generator) -> torch.Tensor:
    """One seeded ``(3, size, size)`` texture in [-1, 1]."""
    yy, xx = _grid(size)
    c0 = torch.from_numpy(rng.uniform(-0.9, 0.9, 3))[:, None, None]
    c1 = torch.from_numpy(rng.uniform(-0.9, 0.9, 3))[:, None, None]
    theta = rng.uniform(0, 2 * math.pi)
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    if kind == "gradient":
        t = (proj / math.sqrt(2) + 1) / 2
    elif kind == "stripes":
        freq = rng.uniform(1.5, 4.0)
        t = (torch.sin(math.pi * freq * proj + rng.uniform(0, 2 * math.pi)) + 1) / 2
    elif kind == "blobs":
        t = torch.zeros_like(xx)
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(-1, 1, 2)
            s = rng.uniform(0.2, 0.6)
            t = t + torch.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        t = t / t.max()
    else:
        raise ConfigError(f"unknown texture kind {kind!r}")
    img = c0 + (c1 - c0) * t[None]
    return img.clamp(-1.0, 1.0).float()


def synthetic_dataset(n: int, size: int = 65, seed: int = 0) -> tuple[list[str], torch.Tensor]:
    """``n`` textures cycling through the kinds; ids are ``<kind>/<index>``."""
    rng = np.random.default_rng(seed)
    ids, imgs = [], []
    for i in range(n):
        kind = TEXTURE_KINDS[i % len(TEXTURE_KINDS)]
        ids.append(f"{kind}/{i:05d}")
        imgs.append(synthetic_texture(kind, size, rng))
    return ids, torch.stack(imgs)


def write_synthetic_dataset(root, per_class: int = 12, size: int = 65, seed: int = 0) -> Path:
    """Write the synthetic set as PNGs in class-named subdirectories."""
    root = Path(root)
    ids, imgs = synthetic_dataset(per_class * len(TEXTURE_KINDS), size, seed)
    for image_id, img in zip(ids, imgs):
        save_image(root / f"{image_id}.png", img)
    return root


def image_iter(manifest: DatasetManifest) -> Iterable[tuple[str, torch.Tensor]]:
    for rec in manifest.records:
        yield rec.image_id, load_image(manifest.abspath(rec), manifest.target_size)
