"""Synthetic impression log with a planted visual-preference signal.

Images are striped patterns: the category fixes stripe orientation and
frequency, a per-image style seed fixes hue and phase. Each user has a latent
category mixture and a preferred hue; clicks depend on how the candidate image
looks next to the user's clicked images, and on category overlap.
"""
from __future__ import annotations

import colorsys
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class SyntheticConfig:
    n_users: int = 2000
    n_categories: int = 8
    images_per_category: int = 40
    image_size: tuple = (32, 32, 3)
    behavior_min: int = 3
    behavior_max: int = 10
    impressions_per_user: int = 30
    test_fraction: float = 1.0 / 6.0
    style_noise: float = 0.5
    alpha: float = 4.0
    beta: float = 1.5
    bias: float = -1.5
    hue_affinity: float = 3.0
    candidate_from_prefs: float = 0.5
    n_context: int = 2
    negative_rate: float = 1.0
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.n_categories < 2:
            raise ConfigError("data.n_categories", "need at least 2 categories")
        if self.n_users < 2:
            raise ConfigError("data.n_users", "need at least 2 users")
        if self.images_per_category < 1:
            raise ConfigError("data.images_per_category", "must be positive")
        if not 0 <= self.behavior_min <= self.behavior_max:
            raise ConfigError("data.behavior_min", "need 0 <= behavior_min <= behavior_max")
        if not 0.0 <= self.style_noise <= 1.0:
            raise ConfigError("data.style_noise", "must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("data.alpha", "alpha and beta must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction", "must lie in (0, 1)")
        if not 0.0 < self.negative_rate <= 1.0:
            raise ConfigError("data.negative_rate", "must lie in (0, 1]")
        if self.impressions_per_user < 1:
            raise ConfigError("data.impressions_per_user", "must be positive")
        if len(self.image_size) != 3 or min(self.image_size) < 1:
            raise ConfigError("data.image_size", "must be [height, width, channels]")
        return self


@dataclass
class Sample:
    user_id: int
    context_ids: List[int]
    item_id: int
    pic_id: int
    category: int
    behaviors: List[List[int]] = field(default_factory=list)  # (pic id, category), oldest first
    label: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        try:
            s = cls(user_id=int(d["user_id"]), context_ids=[int(c) for c in d["context_ids"]],
                    item_id=int(d["item_id"]), pic_id=int(d["pic_id"]), category=int(d["category"]),
                    behaviors=[[int(p), int(c)] for p, c in d.get("behaviors", [])],
                    label=None if d.get("label") is None else int(d["label"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed sample: {exc}") from exc
        return s

    def truncated(self, n: int) -> "Sample":
        """Keep the ``n`` most recent behaviors."""
        if len(self.behaviors) <= n:
            return self
        return Sample(self.user_id, self.context_ids, self.item_id, self.pic_id, self.category,
                      self.behaviors[len(self.behaviors) - n:], self.label)


class ImageCatalog:
    """pic id -> (image, category). Ids are dense: ``0 .. count-1``."""

    def __init__(self, images: np.ndarray, categories: np.ndarray):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.categories = np.asarray(categories, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.categories)

    def __contains__(self, pic_id) -> bool:
        return 0 <= int(pic_id) < len(self)

    def __getitem__(self, pic_id: int):
        return self.images[pic_id], int(self.categories[pic_id])

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    def subset(self, n: int) -> "ImageCatalog":
        return ImageCatalog(self.images[:n], self.categories[:n])

    # binary format: "IMGC", u64 count, then per image
    # u64 id, u16 category, u16 h, u16 w, u16 c, h*w*c float32 (all little-endian)
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(b"IMGC")
        buf.write(struct.pack("<Q", len(self)))
        for pid in range(len(self)):
            img = self.images[pid]
            h, w, c = img.shape
            buf.write(struct.pack("<QHHHH", pid, int(self.categories[pid]), h, w, c))
            buf.write(img.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ImageCatalog":
        if raw[:4] != b"IMGC":
            raise ValueError("not an image catalog (bad magic)")
        (count,) = struct.unpack_from("<Q", raw, 4)
        off = 12
        images, cats = [], []
        for expect in range(count):
            pid, cat, h, w, c = struct.unpack_from("<QHHHH", raw, off)
            off += 16
            if pid != expect:
                raise ValueError(f"catalog ids not dense at entry {expect}")
            n = h * w * c
            images.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(h, w, c))
            off += 4 * n
            cats.append(cat)
        return cls(np.stack(images) if images else np.zeros((0, 1, 1, 1)), np.array(cats))

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ImageCatalog":
        return cls.from_bytes(Path(path).read_bytes())


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _style_rng(style_seed: int, cfg: SyntheticConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x1A6E, style_seed & 0xFFFFFFFFFFFFFFFF])


def style_hue(style_seed: int, cfg: SyntheticConfig) -> float:
    return float(_style_rng(style_seed, cfg).random())


def gen_image(category: int, style_seed: int, cfg: SyntheticConfig) -> np.ndarray:
    """Deterministic striped image in [0, 1], float32, shape ``cfg.image_size``."""
    if not 0 <= category < cfg.n_categories:
        raise ValueError(f"category {category} out of range")
    H, W, C = cfg.image_size
    rng = _style_rng(style_seed, cfg)
    hue = rng.random()
    phase = rng.uniform(0, 2 * np.pi)
    jitter, pixel_noise = rng.standard_normal(), rng.standard_normal((H, W, C))

    theta = np.pi * category / cfg.n_categories + cfg.style_noise * jitter * 0.5 * np.pi / cfg.n_categories
    freq = 2.0 + (category % 3)
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)

    rgb = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))
    color = np.resize(rgb, C)
    img = stripes[..., None] * color + (1.0 - stripes[..., None]) * 0.1
    img = img + 0.2 * cfg.style_noise * pixel_noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def pic_style_seed(pic_id: int) -> int:
    return 0x5EED0000 + int(pic_id)


def gen_catalog(cfg: SyntheticConfig) -> ImageCatalog:
    K, m = cfg.n_categories, cfg.images_per_category
    cats = np.repeat(np.arange(K), m)
    imgs = np.stack([gen_image(int(k), pic_style_seed(pid), cfg) for pid, k in enumerate(cats)])
    return ImageCatalog(imgs, cats)


def downsampled_grid(images: np.ndarray, factor: int = 4) -> np.ndarray:
    """Average-pool ``(..., H, W, C)`` by ``factor`` and flatten, mean-centered per image."""
    *lead, H, W, C = images.shape
    h, w = H // factor, W // factor
    g = images[..., : h * factor, : w * factor, :].reshape(*lead, h, factor, w, factor, C).mean(axis=(-4, -2))
    g = g.reshape(*lead, h * w * C).astype(np.float64)
    return g - g.mean(axis=-1, keepdims=True)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-12)


def visual_similarity(samples: Sequence[Sample], catalog: ImageCatalog) -> np.ndarray:
    """Cosine between the candidate's grid and the mean grid of the user's behavior images."""
    grids = downsampled_grid(catalog.images)
    out = np.zeros(len(samples))
    for i, s in enumerate(samples):
        if s.behaviors:
            ref = grids[[p for p, _ in s.behaviors]].mean(axis=0)
            out[i] = _cosine(grids[s.pic_id], ref)
    return out


def category_match_share(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([np.mean([c == s.category for _, c in s.behaviors]) if s.behaviors else 0.0
                     for s in samples])


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def gen_dataset(cfg: SyntheticConfig):
    """Return ``(train, test, catalog)``; train and test have disjoint users."""
    cfg.validate()
    catalog = gen_catalog(cfg)
    K, m = cfg.n_categories, cfg.images_per_category
    grids = downsampled_grid(catalog.images)
    hues = np.array([style_hue(pic_style_seed(p), cfg) for p in range(len(catalog))])

    order = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0xA11]).permutation(cfg.n_users)
    n_test = max(1, int(round(cfg.n_users * cfg.test_fraction)))
    test_users = set(order[:n_test].tolist())

    train, test = [], []
    for user in range(cfg.n_users):
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x05E4, user])
        prefs = rng.dirichlet(np.full(K, 0.3))
        user_hue = rng.random()
        hue_w = np.exp(cfg.hue_affinity * np.cos(2 * np.pi * (hues - user_hue)))

        n_beh = int(rng.integers(cfg.behavior_min, cfg.behavior_max + 1))
        behaviors = []
        for _ in range(n_beh):
            k = int(rng.choice(K, p=prefs))
            w = hue_w[k * m:(k + 1) * m]
            pid = k * m + int(rng.choice(m, p=w / w.sum()))
            behaviors.append([pid, k])
        ref = grids[[p for p, _ in behaviors]].mean(axis=0) if behaviors else None

        bucket = test if user in test_users else train
        for _ in range(cfg.impressions_per_user):
            k = int(rng.choice(K, p=prefs)) if rng.random() < cfg.candidate_from_prefs else int(rng.integers(K))
            pid = k * m + int(rng.integers(m))
            vis = float(_cosine(grids[pid], ref)) if ref is not None else 0.0
            share = float(np.mean([c == k for _, c in behaviors])) if behaviors else 0.0
            p_click = _sigmoid(cfg.bias + cfg.alpha * vis + cfg.beta * share)
            label = int(rng.random() < p_click)
            ctx = [int(rng.integers(24)), int(rng.integers(4))][: cfg.n_context]
            ctx += [int(rng.integers(16)) for _ in range(cfg.n_context - len(ctx))]
            bucket.append(Sample(user, ctx, pid, pid, k, [list(b) for b in behaviors], label))

    if cfg.negative_rate < 1.0:
        train = downsample_negatives(train, cfg.negative_rate, cfg.seed)
    return train, test, catalog


def downsample_negatives(split: Sequence[Sample], rate: float, seed: int) -> list:
    """Keep all positives and each negative independently with probability ``rate``."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError("data.negative_rate", f"rate must lie in (0, 1], got {rate}")
    if rate == 1.0:
        return list(split)
    u = np.random.default_rng([seed & 0xFFFFFFFF, 0xD0]).random(len(split))
    return [s for s, r in zip(split, u) if s.label == 1 or r < rate]


def save_split(path, samples: Iterable[Sample]) -> None:
    atomic_write(path, "".join(s.to_json() + "\n" for s in samples).encode())


def load_split(path) -> list:
    with open(path) as fh:
        return [Sample.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_dataset(out_dir, train, test, catalog: ImageCatalog) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_split(out / "train.jsonl", train)
    save_split(out / "test.jsonl", test)
    catalog.save(out / "catalog.imgc")


def load_dataset(data_dir):
    d = Path(data_dir)
    return load_split(d / "train.jsonl"), load_split(d / "test.jsonl"), ImageCatalog.load(d / "catalog.imgc")
