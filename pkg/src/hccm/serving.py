"""Lookup-table serving: per-image vectors precomputed offline, no CNN at request time.

Table layout (little-endian): ``"REPT"``, u32 version, u32 dv, u64 count,
u64 model checksum, then ``count * dv`` float32 values. Row ``p`` belongs to
pic id ``p``; catalog ids are dense so they are not stored.
"""
from __future__ import annotations

import hashlib
import json
import struct
import sys
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Optional, TextIO

import numpy as np

from .data import ImageCatalog, Sample, atomic_write
from .model import VISUAL_VARIANTS, HccmModel, ValidationError

MAGIC = b"REPT"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")


class UnsupportedVariantError(ValueError):
    pass


class TableMissError(KeyError):
    pass


class ChecksumMismatchError(ValueError):
    pass


class RepresentationTable:
    """Read-only pic id -> vector mapping; row ``p`` holds pic id ``p``."""

    def __init__(self, dv: int, model_checksum: int, vectors, raw: Optional[bytes] = None):
        self.dv = int(dv)
        self.model_checksum = int(model_checksum)
        self._vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, self.dv)
        self._vectors.setflags(write=False)
        self._raw = raw

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, pic_id) -> bool:
        return 0 <= int(pic_id) < len(self)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    def vectors(self, pic_ids) -> np.ndarray:
        pic_ids = np.asarray(pic_ids, dtype=np.int64)
        missing = pic_ids[(pic_ids < 0) | (pic_ids >= len(self))]
        if missing.size:
            raise TableMissError(f"pic id {int(missing[0])} not in representation table")
        return self._vectors[pic_ids]

    def to_bytes(self) -> bytes:
        if self._raw is None:
            header = _HEADER.pack(MAGIC, VERSION, self.dv, len(self), self.model_checksum)
            self._raw = header + self._vectors.astype("<f4").tobytes()
        return self._raw

    @property
    def checksum(self) -> str:
        return hashlib.blake2b(self.to_bytes(), digest_size=8).hexdigest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RepresentationTable":
        magic, version, dv, count, model_checksum = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValueError("not a representation table (bad magic)")
        if version != VERSION:
            raise ValueError(f"unsupported table version {version}")
        if len(raw) != _HEADER.size + 4 * dv * count:
            raise ValueError("representation table is truncated or has trailing bytes")
        body = np.frombuffer(raw, dtype="<f4", count=count * dv, offset=_HEADER.size)
        return cls(dv, model_checksum, body.reshape(count, dv), raw=bytes(raw))

    @classmethod
    def load(cls, path) -> "RepresentationTable":
        return cls.from_bytes(Path(path).read_bytes())


def export_table(model: HccmModel, catalog: ImageCatalog, out_path=None, cache=None,
                 chunk: int = 512) -> RepresentationTable:
    """Encode every catalog image (under its catalog category) into the table."""
    if model.variant not in VISUAL_VARIANTS:
        raise UnsupportedVariantError(f"variant {model.variant} has no visual path to export")
    ids = catalog.ids  # dense, so row order is pic id order
    parts = []
    for s in range(0, len(ids), chunk):
        pics, cats = ids[s:s + chunk], catalog.categories[s:s + chunk]
        src = {"cache": cache} if cache is not None else {"catalog": catalog}
        parts.append(model.image_vectors(pics, cats, **src).data)
    vecs = np.concatenate(parts) if parts else np.zeros((0, model.cfg.visual_dim(model.variant)))
    table = RepresentationTable(vecs.shape[1], model.checksum(), vecs)
    if out_path is not None:
        atomic_write(out_path, table.to_bytes())
    return table


@dataclass
class PredictResponse:
    y_hat: float
    model_checksum: str
    table_checksum: str

    def to_json(self) -> str:
        return json.dumps({"y_hat": self.y_hat, "model_checksum": self.model_checksum,
                           "table_checksum": self.table_checksum}, separators=(",", ":"))


class Predictor:
    """Model weights plus a representation table, both read-only after construction."""

    def __init__(self, model: HccmModel, table: RepresentationTable):
        if model.variant not in VISUAL_VARIANTS:
            raise UnsupportedVariantError(f"variant {model.variant} cannot serve from a table")
        if table.model_checksum != model.checksum():
            raise ChecksumMismatchError(
                f"table was exported from model {table.model_checksum:016x}, loaded model is {model.checksum():016x}")
        if table.dv != model.cfg.visual_dim(model.variant):
            raise ChecksumMismatchError(f"table dv {table.dv} does not match the model")
        self.model, self.table = model, table
        self.model_checksum = f"{model.checksum():016x}"
        self.table_checksum = table.checksum

    def predict_many(self, samples) -> np.ndarray:
        for s in samples:
            for p in [s.pic_id, *(p for p, _ in s.behaviors[-self.model.cfg.max_behaviors:])]:
                if p not in self.table:
                    raise TableMissError(f"pic id {p} not in representation table")
        return self.model.predict(samples, table=self.table)

    def predict(self, request: Sample) -> PredictResponse:
        y = float(self.predict_many([request])[0])
        return PredictResponse(y, self.model_checksum, self.table_checksum)


def serve_predict(request: Sample, model: HccmModel, table: RepresentationTable) -> PredictResponse:
    return Predictor(model, table).predict(request)


def parse_request(payload) -> Sample:
    d = json.loads(payload) if isinstance(payload, (str, bytes)) else payload
    if not isinstance(d, dict):
        raise ValidationError("request must be a JSON object")
    d = dict(d)
    d.pop("label", None)
    try:
        return Sample.from_dict(d)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def replay(predictor: Predictor, lines: Iterable[str], out: TextIO) -> int:
    """Answer newline-delimited JSON requests; returns the number of rejected ones."""
    rejected = 0
    for line in lines:
        if not line.strip():
            continue
        try:
            out.write(predictor.predict(parse_request(line)).to_json() + "\n")
        except (ValidationError, TableMissError, json.JSONDecodeError) as exc:
            rejected += 1
            msg = exc.args[0] if isinstance(exc, KeyError) else str(exc)
            out.write(json.dumps({"error": type(exc).__name__, "detail": msg}) + "\n")
    out.flush()
    return rejected


def make_server(predictor: Predictor, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def _reply(self, code: int, body: str) -> None:
            data = body.encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):
            if self.path != "/predict":
                self._reply(404, json.dumps({"error": "NotFound"}))
                return
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            try:
                self._reply(200, predictor.predict(parse_request(body)).to_json())
            except TableMissError as exc:
                self._reply(404, json.dumps({"error": "TableMissError", "detail": exc.args[0]}))
            except (ValidationError, json.JSONDecodeError) as exc:
                self._reply(400, json.dumps({"error": type(exc).__name__, "detail": str(exc)}))

        def log_message(self, fmt, *args):
            sys.stderr.write("serve: " + fmt % args + "\n")

    return ThreadingHTTPServer((host, port), Handler)
