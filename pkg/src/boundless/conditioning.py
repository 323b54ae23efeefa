"""Semantic conditioning vectors for the projection discriminator.

A provider maps images to raw embeddings (pre-softmax logits of a pretrained
classifier, or a deterministic random projection for tests). Raw embeddings
are centred with the training-split mean and scaled to unit length. Vectors
are precomputed once into a cache file; training only ever reads the cache.

Cache file layout (little-endian)::

    magic    8 bytes  b"BNDLEMB\\0"
    version  u32
    dim      u32
    count    u64
    digest   32 bytes  sha256 of the stats file payload the cache was built from
    records  count x (u16 id_len, id_len bytes utf-8 id, dim x f32)

Stats file layout::

    magic    8 bytes  b"BNDLSTS\\0"
    version  u32
    dim      u32
    count    u64
    mean     dim x f64
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CacheMissError, DataError, DegenerateEmbeddingError, EmbeddingLoadError

CACHE_MAGIC = b"BNDLEMB\0"
STATS_MAGIC = b"BNDLSTS\0"
FORMAT_VERSION = 1
DEGENERATE_NORM = 1e-12


class EmbeddingProvider(Protocol):
    kind: str
    embed_dim: int

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` images in [-1, 1] -> ``(B, embed_dim)`` raw embeddings (differentiable)."""


class StubEmbedding:
    """Seeded random projection of average-pooled pixels.

    Deterministic and differentiable, it needs no downloaded weights and
    stands in for the classifier everywhere an embedding is consumed.
    """

    kind = "deterministic_stub"

    def __init__(self, embed_dim: int = 1000, seed: int = 0, pool: int = 16):
        self.embed_dim = embed_dim
        self.seed = seed
        self.pool = pool
        rng = torch.Generator().manual_seed(seed)
        fan_in = 3 * pool * pool
        self.projection = torch.randn(fan_in, embed_dim, generator=rng, dtype=torch.float64) / fan_in ** 0.5

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None]
        pooled = F.adaptive_avg_pool2d(x, self.pool).flatten(1)
        return pooled @ self.projection.to(dtype=x.dtype)


class InceptionLogits:
    """Pre-softmax ImageNet logits of torchvision's InceptionV3 (1000-d).

    Weights are read from ``weights_path`` or torchvision's local cache; no
    download is attempted.
    """

    kind = "pretrained_classifier_logits"
    embed_dim = 1000

    def __init__(self, weights_path: Optional[str] = None):
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise EmbeddingLoadError("torchvision is required for the pretrained embedding") from exc
        path = Path(weights_path) if weights_path else self._cached_weights()
        if path is None or not path.is_file():
            raise EmbeddingLoadError(f"InceptionV3 weights not found (looked for {path})")
        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        try:
            net.load_state_dict(torch.load(path, map_location="cpu"))
        except Exception as exc:
            raise EmbeddingLoadError(f"could not load InceptionV3 weights from {path}: {exc}") from exc
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @staticmethod
    def _cached_weights() -> Optional[Path]:
        hub = Path(torch.hub.get_dir()) / "checkpoints"
        found = sorted(hub.glob("inception_v3_google-*.pth")) if hub.is_dir() else []
        return found[0] if found else None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None]
        x = F.interpolate((x + 1) / 2, size=(299, 299), mode="bilinear", align_corners=False)
        x = (x - self.mean.to(x)) / self.std.to(x)
        net = self.net.to(x.dtype)
        return net(x)


def make_provider(kind: str, embed_dim: int = 1000, seed: int = 0, weights_path: Optional[str] = None):
    if kind in ("stub", StubEmbedding.kind):
        return StubEmbedding(embed_dim, seed)
    if kind in ("inception", InceptionLogits.kind):
        return InceptionLogits(weights_path)
    raise EmbeddingLoadError(f"unknown embedding provider {kind!r}")


def embed(provider: EmbeddingProvider, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return provider(x)


@dataclasses.dataclass
class EmbeddingStats:
    mean: np.ndarray
    count: int

    @property
    def embed_dim(self) -> int:
        return int(self.mean.shape[0])

    def payload(self) -> bytes:
        head = struct.pack("<IIQ", FORMAT_VERSION, self.embed_dim, self.count)
        return head + np.asarray(self.mean, dtype="<f8").tobytes()

    def digest(self) -> bytes:
        return hashlib.sha256(self.payload()).digest()

    def save(self, path):
        _atomic_write(path, STATS_MAGIC + self.payload())

    @classmethod
    def load(cls, path) -> "EmbeddingStats":
        data = _read(path)
        if data[:8] != STATS_MAGIC:
            raise DataError(f"{path} is not an embedding stats file")
        version, dim, count = struct.unpack_from("<IIQ", data, 8)
        if version != FORMAT_VERSION:
            raise DataError(f"stats file version {version}, expected {FORMAT_VERSION}")
        mean = np.frombuffer(data, dtype="<f8", count=dim, offset=24).astype(np.float64)
        return cls(mean, count)


def fit_stats(provider: EmbeddingProvider, images: Iterable[torch.Tensor], batch_size: int = 32) -> EmbeddingStats:
    """Arithmetic mean of raw embeddings over a dataset (float64 accumulation)."""
    total = None
    count = 0
    for batch in _batches(images, batch_size):
        emb = embed(provider, batch).double().sum(dim=0)
        total = emb if total is None else total + emb
        count += batch.shape[0]
    if count == 0:
        raise DataError("cannot fit embedding stats on an empty dataset")
    return EmbeddingStats((total / count).numpy(), count)


def normalize(raw, stats: EmbeddingStats) -> torch.Tensor:
    """``(raw - mean) / ||raw - mean||``, row-wise for a batch."""
    raw = torch.as_tensor(raw)
    centred = raw.double() - torch.from_numpy(stats.mean)
    norms = centred.norm(dim=-1, keepdim=True)
    if bool((norms < DEGENERATE_NORM).any()):
        raise DegenerateEmbeddingError("embedding equals the dataset mean; its direction is undefined")
    return (centred / norms).to(raw.dtype if raw.is_floating_point() else torch.float64)


def _batches(images, batch_size):
    if isinstance(images, torch.Tensor):
        for i in range(0, images.shape[0], batch_size):
            yield images[i:i + batch_size]
        return
    chunk = []
    for img in images:
        chunk.append(img if img.dim() == 4 else img[None])
        if sum(c.shape[0] for c in chunk) >= batch_size:
            yield torch.cat(chunk)
            chunk = []
    if chunk:
        yield torch.cat(chunk)


class EmbeddingCache(Mapping[str, np.ndarray]):
    """Read-only id -> unit conditioning vector map backed by a cache file."""

    def __init__(self, vectors: dict[str, np.ndarray], embed_dim: int, stats_digest: bytes):
        self._vectors = vectors
        self.embed_dim = embed_dim
        self.stats_digest = stats_digest

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self._vectors[image_id]
        except KeyError:
            raise CacheMissError(f"no conditioning vector cached for image id {image_id!r}") from None

    def __iter__(self):
        return iter(self._vectors)

    def __len__(self):
        return len(self._vectors)

    def batch(self, ids) -> torch.Tensor:
        return torch.from_numpy(np.stack([self[i] for i in ids]))

    @classmethod
    def load(cls, path, stats: Optional[EmbeddingStats] = None) -> "EmbeddingCache":
        data = _read(path)
        if data[:8] != CACHE_MAGIC:
            raise DataError(f"{path} is not an embedding cache file")
        version, dim, count = struct.unpack_from("<IIQ", data, 8)
        if version != FORMAT_VERSION:
            raise DataError(f"cache version {version}, expected {FORMAT_VERSION}")
        digest = data[24:56]
        if stats is not None and stats.digest() != digest:
            raise DataError("embedding cache was built from different normalization stats")
        offset = 56
        vectors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, offset)
            offset += 2
            image_id = data[offset:offset + n].decode("utf-8")
            offset += n
            vectors[image_id] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float32)
            offset += 4 * dim
        return cls(vectors, dim, digest)


def write_cache(path, vectors: Mapping[str, np.ndarray], stats: EmbeddingStats):
    dim = stats.embed_dim
    parts = [CACHE_MAGIC, struct.pack("<IIQ", FORMAT_VERSION, dim, len(vectors)), stats.digest()]
    for image_id, vec in vectors.items():
        key = image_id.encode("utf-8")
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise DataError(f"vector for {image_id!r} has shape {vec.shape}, expected ({dim},)")
        parts += [struct.pack("<H", len(key)), key, vec.tobytes()]
    _atomic_write(path, b"".join(parts))


def precompute_cache(provider: EmbeddingProvider, stats: EmbeddingStats, dataset, path,
                     batch_size: int = 32) -> EmbeddingCache:
    """Embed and normalize every ``(image_id, image)`` pair of ``dataset`` into ``path``."""
    if provider.embed_dim != stats.embed_dim:
        raise DataError(f"provider dim {provider.embed_dim} does not match stats dim {stats.embed_dim}")
    vectors: dict[str, np.ndarray] = {}
    ids, imgs = [], []

    def flush():
        raw = embed(provider, torch.stack(imgs))
        for i, vec in zip(ids, normalize(raw, stats)):
            vectors[i] = vec.float().numpy()
        ids.clear()
        imgs.clear()

    for image_id, img in dataset:
        if image_id in vectors or image_id in ids:
            raise DataError(f"duplicate image id {image_id!r} in embedding dataset")
        ids.append(image_id)
        imgs.append(img)
        if len(ids) == batch_size:
            flush()
    if ids:
        flush()
    write_cache(path, vectors, stats)
    return EmbeddingCache.load(path, stats)


def _read(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    return path.read_bytes()


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
