"""Frozen-encoder feature datasets: SPPF container, synthetic generator, batching.

SPPF layout (little-endian)::

    b"SPPF" | u16 version | u32 x 7 extents (M, K, C_i, H_s, W_s, C_t, N)
    | u32 x M labels | f32 image maps | f32 [CLS] stack | f32 token stack
    | u64 checksum (BLAKE2b, 8-byte digest, of every preceding byte)
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"SPPF"
VERSION = 1
NUM_TEXT_LAYERS = 4
_HEADER = struct.Struct("<4sH7I")
_CHECKSUM = struct.Struct("<Q")


class SPPFError(ValueError):
    """Base class for container errors; ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(SPPFError):
    pass


class VersionError(SPPFError):
    pass


class TruncatedError(SPPFError):
    pass


class ChecksumError(SPPFError):
    pass


class ExtentError(SPPFError):
    pass


@dataclass
class FeatureDataset:
    image: np.ndarray      # (M, C_i, H_s, W_s)
    cls: np.ndarray        # (M, 4, 1, C_t)
    tokens: np.ndarray     # (M, 4, N, C_t)
    labels: np.ndarray     # (M,)
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.cls = np.ascontiguousarray(self.cls, dtype=np.float32)
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.validate()

    def validate(self) -> None:
        m = self.labels.size
        if self.image.ndim != 4 or self.image.shape[0] != m:
            raise ValueError(f"image maps must be (M={m}, C, H, W), got {self.image.shape}")
        if self.cls.ndim != 4 or self.cls.shape[:3] != (m, NUM_TEXT_LAYERS, 1):
            raise ValueError(f"[CLS] stack must be (M={m}, 4, 1, C_t), got {self.cls.shape}")
        if self.tokens.ndim != 4 or self.tokens.shape[:2] != (m, NUM_TEXT_LAYERS):
            raise ValueError(f"token stack must be (M={m}, 4, N, C_t), got {self.tokens.shape}")
        if self.tokens.shape[3] != self.cls.shape[3]:
            raise ValueError(f"token channels {self.tokens.shape[3]} != [CLS] channels {self.cls.shape[3]}")
        if self.num_classes < 1:
            raise ValueError(f"class count must be positive, got {self.num_classes}")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def extents(self) -> dict:
        _, ci, hs, ws = self.image.shape
        return {"M": len(self), "K": self.num_classes, "C_i": ci, "H_s": hs, "W_s": ws,
                "C_t": self.cls.shape[3], "N": self.tokens.shape[2]}

    def subset(self, indices) -> "FeatureDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(self.image[idx], self.cls[idx], self.tokens[idx], self.labels[idx],
                              self.num_classes, self.provenance)


def _checksum(payload: bytes) -> int:
    return _CHECKSUM.unpack(hashlib.blake2b(payload, digest_size=8).digest())[0]


def encode_sppf(dataset: FeatureDataset) -> bytes:
    dataset.validate()
    e = dataset.extents
    parts = [
        _HEADER.pack(MAGIC, VERSION, e["M"], e["K"], e["C_i"], e["H_s"], e["W_s"], e["C_t"], e["N"]),
        dataset.labels.astype("<u4").tobytes(),
        dataset.image.astype("<f4").tobytes(),
        dataset.cls.astype("<f4").tobytes(),
        dataset.tokens.astype("<f4").tobytes(),
    ]
    body = b"".join(parts)
    return body + _CHECKSUM.pack(_checksum(body))


def decode_sppf(blob: bytes, provenance: str = "") -> FeatureDataset:
    if len(blob) < 4:
        raise TruncatedError("file shorter than magic", len(blob))
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}", 0)
    if len(blob) < _HEADER.size:
        raise TruncatedError("file shorter than header", len(blob))
    _, version, m, k, ci, hs, ws, ct, n = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}", 4)
    if k < 1 or min(ci, hs, ws, ct, n) < 1:
        raise ExtentError(f"invalid extents M={m} K={k} C_i={ci} H_s={hs} W_s={ws} C_t={ct} N={n}", 6)
    sizes = [m, m * ci * hs * ws, m * NUM_TEXT_LAYERS * ct, m * NUM_TEXT_LAYERS * n * ct]
    end = _HEADER.size + 4 * sum(sizes)
    if len(blob) < end + _CHECKSUM.size:
        raise TruncatedError(f"expected {end + _CHECKSUM.size} bytes, found {len(blob)}", len(blob))
    if len(blob) > end + _CHECKSUM.size:
        raise ExtentError(f"{len(blob) - end - _CHECKSUM.size} trailing bytes", end + _CHECKSUM.size)
    (stored,) = _CHECKSUM.unpack_from(blob, end)
    if stored != _checksum(blob[:end]):
        raise ChecksumError("checksum mismatch", end)
    off = _HEADER.size
    arrays = []
    for count, dtype in zip(sizes, ("<u4", "<f4", "<f4", "<f4")):
        arrays.append(np.frombuffer(blob, dtype=dtype, count=count, offset=off))
        off += 4 * count
    labels, image, cls, tokens = arrays
    if m and labels.max() >= k:
        raise ExtentError(f"label {labels.max()} out of range for K={k}", _HEADER.size)
    return FeatureDataset(image.reshape(m, ci, hs, ws), cls.reshape(m, NUM_TEXT_LAYERS, 1, ct),
                          tokens.reshape(m, NUM_TEXT_LAYERS, n, ct), labels.astype(np.int64), k,
                          provenance)


def write_sppf(dataset: FeatureDataset, path) -> None:
    """Write atomically: the target only appears once fully written."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_sppf(dataset))
    os.replace(tmp, path)


def read_sppf(path) -> FeatureDataset:
    path = Path(path)
    return decode_sppf(path.read_bytes(), provenance=f"sppf:{path.name}")


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    samples: int = 512
    classes: int = 4
    latent_dim: int = 16
    gap: float = 2.0
    noise: float = 0.3
    margin: float = 3.0
    seed: int = 0
    image_channels: int = 64
    height: int = 4
    width: int = 4
    text_channels: int = 48
    tokens: int = 16
    probe_threshold: float | None = 0.95

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.samples < 0:
            raise ValueError(f"samples must be >= 0, got {self.samples}")
        for name in ("latent_dim", "image_channels", "height", "width", "text_channels", "tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gap < 0 or self.noise < 0 or self.margin < 0:
            raise ValueError("gap, noise and margin must be non-negative")


@dataclass
class SyntheticResult:
    dataset: FeatureDataset
    image_latents: np.ndarray
    text_latents: np.ndarray
    probe_accuracy: float | None = None
    prototypes: np.ndarray = field(default=None, repr=False)


def _prototypes(rng: np.random.Generator, k: int, dim: int, margin: float,
                attempts: int = 1000) -> np.ndarray:
    for _ in range(attempts):
        protos = rng.normal(size=(k, dim))
        d = np.linalg.norm(protos[:, None] - protos[None, :], axis=-1)
        if d[np.triu_indices(k, 1)].min() >= margin:
            return protos
    raise ValueError(f"could not place {k} prototypes {margin} apart in {dim} dims "
                     f"after {attempts} attempts")


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a logistic-regression probe on a seeded 50/50 split."""
    from sklearn.linear_model import LogisticRegression

    m = labels.size
    order = np.random.default_rng(seed).permutation(m)
    half = m // 2
    train, test = order[:half], order[half:]
    if len(np.unique(labels[train])) < 2 or test.size == 0:
        return float("nan")
    probe = LogisticRegression(max_iter=2000)
    probe.fit(features[train], labels[train])
    return float((probe.predict(features[test]) == labels[test]).mean())


def gen_synthetic(cfg: SyntheticConfig, probe: bool = True) -> SyntheticResult:
    """Seeded stand-in for frozen encoder outputs with a controllable modality gap.

    Raises ``ValueError`` if the image-feature probe accuracy falls below
    ``cfg.probe_threshold``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    m, k, dim = cfg.samples, cfg.classes, cfg.latent_dim
    protos = _prototypes(rng, k, dim, cfg.margin)
    gap_dir = rng.normal(size=dim)
    gap_dir /= np.linalg.norm(gap_dir)
    image_feat = cfg.image_channels * cfg.height * cfg.width
    lift_image = rng.normal(size=(image_feat, dim)) / np.sqrt(dim)
    lift_cls = rng.normal(size=(NUM_TEXT_LAYERS, cfg.text_channels, dim)) / np.sqrt(dim)
    lift_tok = rng.normal(size=(NUM_TEXT_LAYERS, cfg.text_channels, dim)) / np.sqrt(dim)
    token_bias = rng.normal(size=(cfg.tokens, cfg.text_channels)) * 0.1

    labels = np.arange(m) % k
    rng.shuffle(labels)
    z = protos[labels] + cfg.noise * rng.normal(size=(m, dim))
    text_z = z + cfg.gap * gap_dir

    image = z @ lift_image.T + cfg.noise * rng.normal(size=(m, image_feat))
    cls = np.einsum("lcd,md->mlc", lift_cls, text_z)[:, :, None, :]
    cls = cls + cfg.noise * rng.normal(size=cls.shape)
    tok = np.einsum("lcd,md->mlc", lift_tok, text_z)[:, :, None, :] + token_bias[None, None]
    tok = tok + cfg.noise * rng.normal(size=(m, NUM_TEXT_LAYERS, cfg.tokens, cfg.text_channels))

    dataset = FeatureDataset(
        image.reshape(m, cfg.image_channels, cfg.height, cfg.width), cls, tok, labels, k,
        provenance=f"synthetic:seed={cfg.seed}")
    acc = None
    if probe and m >= 2 * k:
        acc = linear_probe_accuracy(dataset.image.reshape(m, -1), labels, cfg.seed)
        if cfg.probe_threshold is not None and not acc >= cfg.probe_threshold:
            raise ValueError(f"synthetic dataset rejected: probe accuracy {acc:.3f} "
                             f"< {cfg.probe_threshold}")
    return SyntheticResult(dataset, z, text_z, acc, protos)


def with_overrides(cfg: SyntheticConfig, **kw) -> SyntheticConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


# ---------------------------------------------------------------- batching

def batches(num_samples: int, batch_size: int, shuffle_seed: int | None = None,
            drop_last: bool = False) -> list[np.ndarray]:
    """Index batches over ``range(num_samples)``.

    ``shuffle_seed=None`` keeps the identity order. A trailing batch of one
    sample is always dropped since contrastive terms need pairs.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = (np.arange(num_samples) if shuffle_seed is None
             else np.random.default_rng(shuffle_seed).permutation(num_samples))
    out = [order[i:i + batch_size] for i in range(0, num_samples, batch_size)]
    if out and out[-1].size < batch_size and (drop_last or out[-1].size == 1):
        out.pop()
    return out


def split_indices(num_samples: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    """Seeded train/val/test partition."""
    order = np.random.default_rng(seed).permutation(num_samples)
    n_train = int(round(fractions[0] * num_samples))
    n_val = int(round(fractions[1] * num_samples))
    return {"train": np.sort(order[:n_train]),
            "val": np.sort(order[n_train:n_train + n_val]),
            "test": np.sort(order[n_train + n_val:])}
