"""On-disk formats: feature banks, GloVe tables, JSONL manifests, checkpoints.

Feature bank layout (all little-endian)::

    b"HVEM" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim (1|2) | u32 dims[ndim] | payload

A checkpoint is a JSON header ``<path>.json`` plus a blob ``<path>`` of f64
values. Parameters are laid out in header order; when optimizer state is saved
the first and second moments of every parameter follow, in the same order.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hve.errors import FormatError, IncompatibleCheckpointError, IntegrityError

log = logging.getLogger(__name__)

MAGIC = b"HVEM"
BANK_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHBB")

# Backbone tokenisation limit from the original setup; kept for provenance only.
SENTENCE_MAX_LENGTH = 128

CKPT_FORMAT = "hve-checkpoint"
CKPT_VERSION = 1


# --------------------------------------------------------------------------
# feature banks


def write_feature_bank(path, array, dtype="f32"):
    arr = np.asarray(array)
    if arr.ndim not in (1, 2):
        raise ValueError(f"feature bank must be 1-D or 2-D, got shape {arr.shape}")
    code = {"f32": 0, "f64": 1}[dtype]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, BANK_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_feature_bank(path):
    """Read a feature bank; values are promoted to float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", path, len(raw))
    magic, version, code, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path, 0)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", path, 6)
    if ndim not in (1, 2):
        raise FormatError(f"ndim must be 1 or 2, got {ndim}", path, 7)
    off = _HEADER.size
    if len(raw) < off + 4 * ndim:
        raise FormatError("truncated dims", path, len(raw))
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    dt = _DTYPES[code]
    need = math.prod(dims) * dt.itemsize
    have = len(raw) - off
    if have < need:
        raise FormatError(f"payload truncated: expected {need} bytes, found {have}", path, len(raw))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", path, off + need)
    return np.frombuffer(raw, dtype=dt, count=math.prod(dims), offset=off).astype(np.float64).reshape(dims)


# --------------------------------------------------------------------------
# GloVe


@dataclass
class WordVectorTable:
    dim: int
    vectors: dict = field(default_factory=dict)
    duplicates: int = 0

    def __contains__(self, token):
        return token.lower() in self.vectors

    def __len__(self):
        return len(self.vectors)

    def get(self, token):
        """Vector for ``token`` (case-insensitive) or ``None``."""
        return self.vectors.get(token.lower())


def load_glove(path):
    """Load a GloVe-format text file.

    Tokens are lowercased; a repeated token keeps its last vector and is
    counted in ``duplicates``.
    """
    table = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip("\r").split(" ")
            if not parts or parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            if not values:
                raise FormatError(f"line has a token but no vector: {token!r}", path, lineno)
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"non-numeric vector component ({exc})", path, lineno) from None
            if table is None:
                table = WordVectorTable(dim=len(vec))
            elif len(vec) != table.dim:
                raise FormatError(
                    f"ragged dimension: {len(vec)} values, expected {table.dim}", path, lineno
                )
            key = token.lower()
            if key in table.vectors:
                table.duplicates += 1
            table.vectors[key] = vec
    if table is None:
        raise FormatError("empty GloVe file", path, 1)
    if table.duplicates:
        log.info("%s: %d duplicate tokens (last occurrence kept)", path, table.duplicates)
    return table


def write_glove(path, vectors, precision=None):
    """Write GloVe text; ``precision=None`` uses shortest round-trip floats."""
    fmt = repr if precision is None else (lambda v: f"{v:.{precision}f}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(fmt(float(v)) for v in vec) + "\n")


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Instance:
    id: str
    relation: str
    tokens_range: tuple
    image_row: int
    objects: tuple
    head: str
    tail: str
    tokens: np.ndarray = field(repr=False, compare=False, default=None)
    image: np.ndarray = field(repr=False, compare=False, default=None)

    def to_json(self):
        return {
            "id": self.id,
            "relation": self.relation,
            "tokens_range": list(self.tokens_range),
            "image_row": self.image_row,
            "objects": list(self.objects),
            "head": self.head,
            "tail": self.tail,
        }


@dataclass
class Dataset:
    instances: list
    tokens_bank: np.ndarray
    image_bank: np.ndarray

    def by_relation(self):
        groups = OrderedDict()
        for inst in self.instances:
            groups.setdefault(inst.relation, []).append(inst)
        return groups

    @property
    def relations(self):
        return sorted({i.relation for i in self.instances})

    def __len__(self):
        return len(self.instances)


_FIELDS = ("id", "relation", "tokens_range", "image_row", "objects", "head", "tail")


def load_manifest(path, tokens_bank, image_bank):
    """Parse a JSONL manifest against already-loaded feature banks."""
    if tokens_bank.ndim != 2 or image_bank.ndim != 2:
        raise FormatError("feature banks must be 2-D", path)
    instances = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", path, lineno) from None
            missing = [k for k in _FIELDS if k not in rec]
            if missing:
                raise FormatError(f"missing fields {missing}", path, lineno)
            iid = str(rec["id"])
            if iid in seen:
                raise IntegrityError(f"duplicate instance id {iid!r}", iid)
            seen.add(iid)
            start, end = (int(v) for v in rec["tokens_range"])
            if not 0 <= start < end <= tokens_bank.shape[0]:
                raise IntegrityError(
                    f"instance {iid!r}: tokens_range [{start},{end}) outside token bank "
                    f"of {tokens_bank.shape[0]} rows",
                    iid,
                )
            row = int(rec["image_row"])
            if not 0 <= row < image_bank.shape[0]:
                raise IntegrityError(
                    f"instance {iid!r}: image_row {row} outside image bank of "
                    f"{image_bank.shape[0]} rows",
                    iid,
                )
            instances.append(
                Instance(
                    id=iid,
                    relation=str(rec["relation"]),
                    tokens_range=(start, end),
                    image_row=row,
                    objects=tuple(str(o) for o in rec["objects"]),
                    head=str(rec["head"]),
                    tail=str(rec["tail"]),
                    tokens=tokens_bank[start:end],
                    image=image_bank[row],
                )
            )
    return instances


def open_dataset(path):
    """Load a manifest together with the feature banks its records point at.

    Bank paths are taken from the ``tokens_bank``/``image_bank`` keys of the
    records, resolved relative to the manifest's directory.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = next((json.loads(l) for l in fh if l.strip()), None)
    if first is None:
        raise FormatError("empty manifest", path, 1)
    try:
        tok_path = path.parent / first["tokens_bank"]
        img_path = path.parent / first["image_bank"]
    except KeyError as exc:
        raise FormatError(f"manifest lacks sidecar path {exc}", path, 1) from None
    tokens = load_feature_bank(tok_path)
    images = load_feature_bank(img_path)
    return Dataset(load_manifest(path, tokens, images), tokens, images)


def write_manifest(path, instances, tokens_bank, image_bank):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            rec = inst.to_json() if isinstance(inst, Instance) else dict(inst)
            rec["tokens_bank"] = str(tokens_bank)
            rec["image_bank"] = str(image_bank)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# checkpoints


def _header_path(path):
    return Path(str(path) + ".json")


def save_checkpoint(params, path, optimizer=None, meta=None):
    """Write ``params`` (name -> ndarray or Tensor) and optional AdamW state."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    arrays = OrderedDict((k, np.asarray(getattr(v, "data", v), dtype=np.float64)) for k, v in params.items())
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        blobs.append(arr)
        offset += arr.size * 8
    header = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "optimizer_state": optimizer is not None,
        "params": entries,
        "meta": meta or {},
    }
    if optimizer is not None:
        moments = []
        for name, arr in arrays.items():
            m, v = optimizer.m[name], optimizer.v[name]
            moments.append({"name": name, "m_offset": offset, "v_offset": offset + arr.size * 8})
            blobs.extend([m, v])
            offset += 2 * arr.size * 8
        header["optimizer"] = {
            "step": optimizer.t,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "moments": moments,
        }
    header["blob_bytes"] = offset
    with open(path, "wb") as fh:
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    _header_path(path).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    params: OrderedDict
    optimizer: dict | None
    meta: dict


def load_checkpoint(path, expected_shapes=None):
    """Read a checkpoint; ``expected_shapes`` (name -> shape) enforces compatibility."""
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError("checkpoint header missing", _header_path(path)) from None
    if header.get("format") != CKPT_FORMAT or header.get("version") != CKPT_VERSION:
        raise FormatError("not an hve checkpoint header", _header_path(path))
    blob = path.read_bytes()
    if len(blob) != header["blob_bytes"]:
        raise FormatError(
            f"blob is {len(blob)} bytes, header declares {header['blob_bytes']}", path, len(blob)
        )

    def read(offset, shape):
        n = math.prod(shape)
        if offset + 8 * n > len(blob):
            raise FormatError("entry runs past end of blob", path, offset)
        return np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)

    params = OrderedDict()
    end = 0
    for e in header["params"]:
        if e["byte_offset"] < end:
            raise FormatError(f"overlapping entry {e['name']!r}", path, e["byte_offset"])
        params[e["name"]] = read(e["byte_offset"], tuple(e["shape"]))
        end = e["byte_offset"] + 8 * params[e["name"]].size

    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            got = params.get(name)
            if got is None:
                raise IncompatibleCheckpointError(f"parameter {name!r} missing from checkpoint", name)
            if got.shape != tuple(shape):
                raise IncompatibleCheckpointError(
                    f"parameter {name!r}: checkpoint shape {got.shape} != model shape {tuple(shape)}",
                    name,
                )
        extra = [n for n in params if n not in expected_shapes]
        if extra:
            raise IncompatibleCheckpointError(f"unexpected parameter {extra[0]!r} in checkpoint", extra[0])

    opt = None
    if header.get("optimizer_state"):
        o = header["optimizer"]
        opt = {k: o[k] for k in ("step", "lr", "beta1", "beta2", "eps", "weight_decay")}
        opt["m"] = OrderedDict()
        opt["v"] = OrderedDict()
        for e in o["moments"]:
            shape = params[e["name"]].shape
            opt["m"][e["name"]] = read(e["m_offset"], shape)
            opt["v"][e["name"]] = read(e["v_offset"], shape)
    return Checkpoint(params, opt, header.get("meta", {}))
