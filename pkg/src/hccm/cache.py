"""Precomputed fixed-CNN feature maps keyed by pic id.

File layout (little-endian): ``"FMC1"``, u32 version, u32 h, u32 w, u32 c,
u64 count, u64 fixed-CNN checksum, then ``count`` entries of u64 pic id and
h*w*c float32 values.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .data import ImageCatalog, atomic_write
from .model import CacheMissError, HccmModel

MAGIC = b"FMC1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQQ")


class StaleCacheError(ValueError):
    pass


class FeatureMapCache:
    def __init__(self, extent: tuple, checksum: int, ids: np.ndarray, maps: np.ndarray):
        self.extent = tuple(int(e) for e in extent)
        self.checksum = int(checksum)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.maps = np.asarray(maps, dtype=np.float32)
        self.maps.setflags(write=False)
        self._row = {int(p): i for i, p in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, pic_id) -> bool:
        return int(pic_id) in self._row

    def lookup(self, pic_id: int) -> np.ndarray:
        try:
            return self.maps[self._row[int(pic_id)]]
        except KeyError:
            raise CacheMissError(f"pic id {pic_id} not in feature-map cache") from None

    def lookup_many(self, pic_ids) -> np.ndarray:
        try:
            rows = [self._row[int(p)] for p in pic_ids]
        except KeyError as exc:
            raise CacheMissError(f"pic id {exc.args[0]} not in feature-map cache") from None
        return self.maps[rows]

    def to_bytes(self) -> bytes:
        h, w, c = self.extent
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, h, w, c, len(self), self.checksum))
        for pid, fmap in zip(self.ids, self.maps):
            buf.write(struct.pack("<Q", int(pid)))
            buf.write(fmap.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, expected_checksum=None) -> "FeatureMapCache":
        magic, version, h, w, c, count, checksum = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValueError("not a feature-map cache (bad magic)")
        if version != VERSION:
            raise ValueError(f"unsupported cache version {version}")
        if expected_checksum is not None and checksum != expected_checksum:
            raise StaleCacheError(
                f"cache built with fixed-CNN checksum {checksum:016x}, current weights are {expected_checksum:016x}")
        n = h * w * c
        rec = np.dtype([("id", "<u8"), ("v", "<f4", (n,))])
        body = np.frombuffer(raw, dtype=rec, count=count, offset=_HEADER.size)
        return cls((h, w, c), checksum, body["id"].astype(np.int64), body["v"].reshape(count, h, w, c))

    @classmethod
    def load(cls, path, model: HccmModel = None) -> "FeatureMapCache":
        """Load a cache; with ``model`` given, reject it unless the fixed CNN matches."""
        expected = model.fixed_checksum() if model is not None else None
        cache = cls.from_bytes(Path(path).read_bytes(), expected)
        if model is not None and cache.extent != tuple(model.cfg.map_extent):
            raise StaleCacheError(f"cache extent {cache.extent} != model map extent {model.cfg.map_extent}")
        return cache


def precompute(catalog: ImageCatalog, model: HccmModel, out_path=None) -> FeatureMapCache:
    """Run every catalog image through the fixed CNN once."""
    if len(catalog) == 0:
        raise ValueError("cannot precompute an empty catalog")
    maps = np.stack([model.fixed_features(catalog.images[p]) for p in range(len(catalog))])
    cache = FeatureMapCache(model.cfg.map_extent, model.fixed_checksum(), catalog.ids, maps)
    if out_path is not None:
        atomic_write(out_path, cache.to_bytes())
    return cache


def lookup(cache: FeatureMapCache, pic_id: int) -> np.ndarray:
    return cache.lookup(pic_id)
