"""CTR model variants: DIN, DIN+FixedCNN, HCM and HCCM.

Visual variants encode every image independently of the request:
fixed CNN -> (channel attention, optional category prior) -> trainable CNN
-> global average pool. Each batch runs that encoder once per distinct
(pic id, category) pair and gathers the vectors into behavior slots, which
is what makes the representation table in ``serving`` exact.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ConfigError, Sample, atomic_write
from .nn import EmbeddingTable, MlpParams, attention, mlp_forward
from .tensor import Tensor

VARIANTS = ("DIN", "DIN+FixedCNN", "HCM", "HCCM")
VISUAL_VARIANTS = VARIANTS[1:]


class CacheMissError(KeyError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: tuple = (32, 32, 3)
    fixed_channels: tuple = (8, 12, 16)
    fixed_seed: int = 1234
    trainable_channels: tuple = (32, 32)
    attn_reduction: int = 4
    emb_dim: int = 8
    n_context: int = 2
    n_categories: int = 8
    user_table: int = 4096
    context_table: int = 64
    item_table: int = 1024
    pic_table: int = 1024
    category_table: int = 64
    hidden: tuple = (400, 160, 80)
    max_behaviors: int = 10
    precision: str = "float64"

    def validate(self) -> "ModelConfig":
        if self.precision not in ("float64", "float32"):
            raise ConfigError("model.precision", "must be float64 or float32")
        for name in ("fixed_channels", "trainable_channels", "hidden"):
            vals = getattr(self, name)
            if not vals or any(int(v) < 1 for v in vals):
                raise ConfigError(f"model.{name}", "must be a non-empty list of positive ints")
        for name in ("user_table", "context_table", "item_table", "pic_table", "category_table"):
            n = getattr(self, name)
            if n < 1 or n & (n - 1):
                raise ConfigError(f"model.{name}", "table sizes must be powers of two")
        if self.max_behaviors < 1:
            raise ConfigError("model.max_behaviors", "must be positive")
        if self.n_categories < 1:
            raise ConfigError("model.n_categories", "must be positive")
        self.map_extent  # raises on impossible stacks
        return self

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def map_extent(self) -> tuple:
        """(h, w, c) of the fixed-CNN feature map: 3x3 stride-2 'same' stages."""
        h, w, _ = self.image_size
        for _ in self.fixed_channels:
            h, w = -(-h // 2), -(-w // 2)
        return h, w, self.fixed_channels[-1]

    def visual_dim(self, variant: str) -> int:
        if variant == "DIN":
            return 0
        if variant == "DIN+FixedCNN":
            return self.fixed_channels[-1]
        return self.trainable_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise ConfigError(f"model.{k}", "unknown key")
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass
class Batch:
    user: np.ndarray
    context: np.ndarray
    item: np.ndarray
    pic: np.ndarray
    category: np.ndarray
    beh_pic: np.ndarray
    beh_cat: np.ndarray
    mask: np.ndarray
    label: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.user)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], max_behaviors: int, n_context: int,
                     n_categories: Optional[int] = None) -> "Batch":
        B = len(samples)
        if B == 0:
            raise ValidationError("empty batch")
        for i, s in enumerate(samples):
            _check_sample(i, s, n_categories)
        n = max(1, min(max_behaviors, max(len(s.behaviors) for s in samples)))
        beh_pic = np.zeros((B, n), dtype=np.int64)
        beh_cat = np.zeros((B, n), dtype=np.int64)
        mask = np.zeros((B, n), dtype=bool)
        ctx = np.zeros((B, n_context), dtype=np.int64)
        for i, s in enumerate(samples):
            if len(s.context_ids) != n_context:
                raise ValidationError(f"sample {i}: expected {n_context} context ids, got {len(s.context_ids)}")
            ctx[i] = s.context_ids
            beh = s.behaviors[-n:] if len(s.behaviors) > n else s.behaviors
            for j, (p, c) in enumerate(beh):
                beh_pic[i, j], beh_cat[i, j], mask[i, j] = p, c, True
        labels = [s.label for s in samples]
        return cls(
            user=np.array([s.user_id for s in samples], dtype=np.int64),
            context=ctx,
            item=np.array([s.item_id for s in samples], dtype=np.int64),
            pic=np.array([s.pic_id for s in samples], dtype=np.int64),
            category=np.array([s.category for s in samples], dtype=np.int64),
            beh_pic=beh_pic, beh_cat=beh_cat, mask=mask,
            label=None if any(l is None for l in labels) else np.array(labels, dtype=np.float64),
        )


def _check_sample(i: int, s: Sample, n_categories: Optional[int]) -> None:
    cats = [s.category] + [c for _, c in s.behaviors]
    ids = [s.user_id, s.item_id, s.pic_id, *s.context_ids, *(p for p, _ in s.behaviors)]
    if min(ids + cats) < 0:
        raise ValidationError(f"sample {i}: ids must be non-negative")
    if n_categories is not None and max(cats) >= n_categories:
        raise ValidationError(f"sample {i}: category out of range (K={n_categories})")
    if s.label not in (None, 0, 1):
        raise ValidationError(f"sample {i}: label must be 0 or 1, got {s.label!r}")


def strict_sigmoid(z: Tensor) -> Tensor:
    """Sigmoid kept strictly inside (0, 1): saturation would otherwise round to 0 or 1."""
    fi = np.finfo(z.dtype)
    return T.clip(T.sigmoid(z), float(fi.tiny), 1.0 - float(fi.epsneg))


def _conv_init(rng, k, cin, cout):
    return rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout))


class HccmModel:
    """Parameters of one variant plus its forward pass.

    ``params`` is an ordered mapping name -> Tensor in declaration order;
    ``frozen`` names the fixed-CNN parameters, which never require grad.
    """

    def __init__(self, cfg: ModelConfig, variant: str = "HCCM", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        cfg.validate()
        self.cfg, self.variant, self.seed = cfg, variant, seed
        dt = cfg.dtype
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x40DE1])
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen: set = set()

        d = cfg.emb_dim
        self.tables = {
            "user": EmbeddingTable(cfg.user_table, d, hash_seed=0x11),
            "context": EmbeddingTable(cfg.context_table, d, hash_seed=0x22),
            "item": EmbeddingTable(cfg.item_table, d, hash_seed=0x33),
            "pic": EmbeddingTable(cfg.pic_table, d, hash_seed=0x44),
            "category": EmbeddingTable(cfg.category_table, d, hash_seed=0x55),
        }
        for name, table in self.tables.items():
            table.init(rng, dtype=dt)
            self.params[f"emb.{name}"] = table.weights

        self.fixed_layers = []
        self.attn_mlp = None
        self.trainable_layers = []
        if variant in VISUAL_VARIANTS:
            frng = np.random.default_rng([cfg.fixed_seed & 0xFFFFFFFF, 0xF1C5])
            cin = cfg.image_size[2]
            for i, cout in enumerate(cfg.fixed_channels):
                # stored at 32-bit so checkpoints and caches agree bitwise
                w = Tensor(_conv_init(frng, 3, cin, cout).astype(np.float32).astype(dt))
                b = Tensor(np.zeros(cout, dtype=dt))
                self.params[f"fixed.conv{i}.w"], self.params[f"fixed.conv{i}.b"] = w, b
                self.frozen |= {f"fixed.conv{i}.w", f"fixed.conv{i}.b"}
                self.fixed_layers.append((w, b))
                cin = cout

        h, w_, c = cfg.map_extent
        if variant in ("HCM", "HCCM"):
            prior_len = h * w_ if variant == "HCCM" else 0
            bottleneck = max(c // cfg.attn_reduction, 4)
            self.attn_mlp = MlpParams([c + prior_len, bottleneck, c], ["relu", "none"]).init(rng, dtype=dt)
            for i, t in enumerate(self.attn_mlp.tensors()):
                self.params[f"attn.{'wb'[i % 2]}{i // 2}"] = t
            if variant == "HCCM":
                self.params["prior.table"] = Tensor(np.zeros((cfg.n_categories, h * w_), dtype=dt),
                                                    requires_grad=True)
            cin = c + (1 if variant == "HCCM" else 0)
            for i, cout in enumerate(cfg.trainable_channels):
                wt = Tensor(_conv_init(rng, 3, cin, cout).astype(dt), requires_grad=True)
                bt = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)
                self.params[f"trainable.conv{i}.w"], self.params[f"trainable.conv{i}.b"] = wt, bt
                self.trainable_layers.append((wt, bt))
                cin = cout

        dv = cfg.visual_dim(variant)
        head_in = self.nonvisual_dim + 3 * dv
        dims = [head_in, *cfg.hidden, 1]
        self.head = MlpParams(dims, ["relu"] * len(cfg.hidden) + ["none"]).init(rng, dtype=dt)
        for i, t in enumerate(self.head.tensors()):
            self.params[f"head.{'wb'[i % 2]}{i // 2}"] = t

    # ------------------------------------------------------------------
    @property
    def nonvisual_dim(self) -> int:
        d = self.cfg.emb_dim
        return d + d * self.cfg.n_context + 2 * d + 2 * d + 2 * d

    @property
    def prior_table(self) -> Optional[Tensor]:
        return self.params.get("prior.table")

    def trainable(self) -> list:
        return [t for n, t in self.params.items() if n not in self.frozen]

    def frozen_params(self) -> list:
        return [self.params[n] for n in self.params if n in self.frozen]

    def fixed_checksum(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        for t in self.frozen_params():
            h.update(t.data.astype("<f4").tobytes())
        return int.from_bytes(h.digest(), "little")

    def checksum(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.variant.encode())
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.astype("<f4").tobytes())
        return int.from_bytes(h.digest(), "little")

    # ------------------------------------------------------------------
    # visual path
    def fixed_features(self, image: np.ndarray) -> np.ndarray:
        """Frozen feature map of one image, rounded to 32-bit (the cached precision)."""
        if tuple(image.shape) != tuple(self.cfg.image_size):
            raise T.ShapeError(f"image shape {image.shape} != configured {tuple(self.cfg.image_size)}")
        if not self.fixed_layers:
            raise ValueError(f"variant {self.variant} has no fixed CNN")
        x = Tensor(np.asarray(image, dtype=self.cfg.dtype))
        for w, b in self.fixed_layers:
            x = T.relu(T.add(T.conv2d(x, w, stride=2, padding="same"), b))
        return x.data.astype(np.float32)

    def channel_attention(self, F: Tensor, prior: Optional[Tensor] = None) -> Tensor:
        avg, mx = T.global_pool("avg", F), T.global_pool("max", F)
        if prior is not None:
            h, w, _ = F.shape[-3:]
            if prior.shape[-1] != h * w:
                raise T.ShapeError(f"prior length {prior.shape[-1]} != map area {h * w}")
            avg, mx = T.concat([avg, prior], axis=-1), T.concat([mx, prior], axis=-1)
        return strict_sigmoid(T.add(mlp_forward(self.attn_mlp, avg), mlp_forward(self.attn_mlp, mx)))

    def trainable_cnn(self, Fbar: Tensor) -> Tensor:
        x = Fbar
        for w, b in self.trainable_layers:
            x = T.relu(T.add(T.conv2d(x, w, stride=1, padding="same"), b))
        return T.global_pool("avg", x)

    def encode_images(self, fmaps: np.ndarray, categories: np.ndarray) -> Tensor:
        """Visual vectors ``(P, dv)`` from fixed maps ``(P, h, w, c)``."""
        F = Tensor(np.asarray(fmaps, dtype=self.cfg.dtype))
        if self.variant == "DIN+FixedCNN":
            return T.global_pool("avg", F)
        if self.variant == "HCM":
            return self.trainable_cnn(T.channel_scale(F, self.channel_attention(F)))
        prior = T.take(self.prior_table, categories)
        M = self.channel_attention(F, prior)
        return self.trainable_cnn(fuse_prior(F, M, prior))

    def image_vectors(self, pics, cats, *, cache=None, catalog=None, table=None) -> Tensor:
        if table is not None:
            return Tensor(table.vectors(pics).astype(self.cfg.dtype))
        if cache is not None:
            fmaps = cache.lookup_many(pics)
        elif catalog is not None:
            for p in pics:
                if p not in catalog:
                    raise CacheMissError(f"pic id {p} not in catalog")
            fmaps = np.stack([self.fixed_features(catalog.images[p]) for p in pics])
        else:
            raise ValueError("visual variants need a cache, a catalog or a representation table")
        return self.encode_images(fmaps, cats)

    # ------------------------------------------------------------------
    def nonvisual(self, b: Batch) -> tuple:
        tb = self.tables
        B = len(b)
        u = tb["user"](b.user)
        c = T.reshape(tb["context"](b.context.reshape(-1)), (B, -1))
        cat = tb["category"](b.category)
        i = T.concat([tb["item"](b.item), cat], axis=-1)
        q = T.concat([tb["pic"](b.pic), cat], axis=-1)
        n = b.beh_pic.shape[1]
        keys = T.concat([tb["pic"](b.beh_pic.reshape(-1)), tb["category"](b.beh_cat.reshape(-1))], axis=-1)
        keys = T.reshape(keys, (B, n, q.shape[-1]))
        h = attention(q, keys, keys, b.mask, allow_empty=True)
        return T.concat([u, c, i, h, T.mul(h, q)], axis=-1)

    def logits(self, b: Batch, *, cache=None, catalog=None, table=None) -> Tensor:
        parts = [self.nonvisual(b)]
        if self.variant != "DIN":
            beh_pic = np.where(b.mask, b.beh_pic, -1)
            pairs = np.concatenate([np.stack([b.pic, b.category], 1),
                                    np.stack([beh_pic[b.mask], b.beh_cat[b.mask]], 1)])
            uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            V = self.image_vectors(uniq[:, 0], uniq[:, 1], cache=cache, catalog=catalog, table=table)
            B = len(b)
            cand = T.take(V, inv[:B])
            slot = np.zeros(b.beh_pic.shape, dtype=np.int64)
            slot[b.mask] = inv[B:]
            beh = T.take(V, slot)
            x_v = aggregate_behaviors(beh, cand, b.mask)
            parts += [x_v, cand, T.mul(x_v, cand)]
        out = mlp_forward(self.head, T.concat(parts, axis=-1))
        return T.reshape(out, (len(b),))

    def forward(self, b: Batch, **sources) -> Tensor:
        return strict_sigmoid(self.logits(b, **sources))

    def batch(self, samples: Sequence[Sample]) -> Batch:
        return Batch.from_samples(samples, self.cfg.max_behaviors, self.cfg.n_context, self.cfg.n_categories)

    def predict(self, samples: Sequence[Sample], batch_size: int = 1024, **sources) -> np.ndarray:
        out = []
        for start in range(0, len(samples), batch_size):
            out.append(self.forward(self.batch(samples[start:start + batch_size]), **sources).data)
        return np.concatenate(out) if out else np.zeros(0)

    # ------------------------------------------------------------------
    # checkpoint: "HCCM", u32 version, u8 len + variant, u32 len + JSON
    # hyperparameters, u32 param count, then per parameter in declaration
    # order: u16 len + name, u8 ndim, u32 dims, float32 LE values
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(b"HCCM")
        buf.write(struct.pack("<I", 1))
        v = self.variant.encode()
        buf.write(struct.pack("<B", len(v)) + v)
        hp = json.dumps({"model": self.cfg.to_dict(), "seed": self.seed}, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(hp)) + hp)
        buf.write(struct.pack("<I", len(self.params)))
        for name, t in self.params.items():
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)) + nb)
            buf.write(struct.pack("<B", t.data.ndim))
            buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            buf.write(t.data.astype("<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, precision: Optional[str] = None) -> "HccmModel":
        if raw[:4] != b"HCCM":
            raise ValueError("not a model checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 8
        (nv,) = struct.unpack_from("<B", raw, off)
        variant = raw[off + 1:off + 1 + nv].decode()
        off += 1 + nv
        (nh,) = struct.unpack_from("<I", raw, off)
        hp = json.loads(raw[off + 4:off + 4 + nh])
        off += 4 + nh
        cfg = ModelConfig.from_dict(hp["model"])
        if precision:
            cfg.precision = precision
        model = cls(cfg, variant, seed=hp["seed"])
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        if count != len(model.params):
            raise ValueError("checkpoint parameter count does not match its configuration")
        for name in model.params:
            (nn_,) = struct.unpack_from("<H", raw, off)
            got = raw[off + 2:off + 2 + nn_].decode()
            off += 2 + nn_
            if got != name:
                raise ValueError(f"checkpoint parameter {got!r} where {name!r} expected")
            (nd,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{nd}I", raw, off + 1)
            off += 1 + 4 * nd
            size = int(np.prod(shape))
            vals = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            t = model.params[name]
            if t.shape != tuple(shape):
                raise ValueError(f"parameter {name} has shape {shape}, expected {t.shape}")
            t.data[...] = vals
        return model

    @classmethod
    def load(cls, path, precision: Optional[str] = None) -> "HccmModel":
        return cls.from_bytes(Path(path).read_bytes(), precision)


# ----------------------------------------------------------------------
# operation-level entry points

def fixed_cnn_forward(img: np.ndarray, model: HccmModel) -> np.ndarray:
    return model.fixed_features(img)


def channel_attention(F, v, model: HccmModel) -> Tensor:
    F = F if isinstance(F, Tensor) else Tensor(np.asarray(F, dtype=model.cfg.dtype))
    if v is not None and not isinstance(v, Tensor):
        v = Tensor(np.asarray(v, dtype=model.cfg.dtype))
    return model.channel_attention(F, v)


def fuse_prior(F: Tensor, M: Tensor, v: Tensor) -> Tensor:
    """Gate ``F`` by ``M`` per channel and append the prior, reshaped to h×w, as one channel."""
    h, w = F.shape[-3], F.shape[-2]
    if v.shape[-1] != h * w:
        raise T.ShapeError(f"prior length {v.shape[-1]} != map area {h * w}")
    A = T.reshape(v, v.shape[:-1] + (h, w, 1))
    return T.concat([T.channel_scale(F, M), A], axis=-1)


def trainable_cnn_forward(Fbar: Tensor, model: HccmModel) -> Tensor:
    expected = model.cfg.map_extent[2] + (1 if model.variant == "HCCM" else 0)
    if Fbar.shape[-1] != expected:
        raise T.ShapeError(f"trainable CNN expects {expected} channels, got {Fbar.shape[-1]}")
    return model.trainable_cnn(Fbar)


def aggregate_behaviors(user_vecs: Tensor, item_vec: Tensor, mask) -> Tensor:
    """Attention of the candidate vector over behavior vectors; zeros when there are none."""
    mask = np.asarray(mask, dtype=bool)
    if user_vecs.shape[-2] == 0:
        return Tensor(np.zeros(item_vec.shape, dtype=item_vec.dtype))
    return attention(item_vec, user_vecs, user_vecs, mask, allow_empty=True)


def model_forward(sample: Sample, variant: str, model: HccmModel, cache=None, catalog=None,
                  table=None) -> float:
    if variant != model.variant:
        raise ValueError(f"model holds variant {model.variant}, not {variant}")
    return float(model.forward(model.batch([sample]), cache=cache, catalog=catalog, table=table).data[0])
