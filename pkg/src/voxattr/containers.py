"""Binary container files for volumes, logit fields, and masks.

Layout: 8-byte magic ``A2XVOL1\\0``, u32 little-endian header length, a
canonical JSON header (sorted keys, no whitespace), then the raw payload.
Payloads are little-endian: float32 for volumes and logits, uint8 for masks,
in the flat voxel order defined by ``voxattr.volume``.

Writes go through a temp file in the destination directory followed by an
atomic rename, so readers never observe a half-written container.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any

import numpy as np

from .volume import ClassMask, LogitField, Volume

MAGIC = b"A2XVOL1\x00"
_LEN = struct.Struct("<I")

KIND_VOLUME = "volume"
KIND_LOGITS = "logits"
KIND_MASK = "mask"


class ContainerError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class SizeMismatchError(ContainerError):
    pass


def _canonical_header(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _atomic_write(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".a2x-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_bytes(path: str, blob: bytes) -> None:
    _atomic_write(path, blob)


def atomic_write_text(path: str, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def _encode(header: dict[str, Any], payload: bytes) -> bytes:
    hdr = _canonical_header(header)
    return MAGIC + _LEN.pack(len(hdr)) + hdr + payload


def _payload_dtype(kind: str) -> np.dtype:
    return np.dtype("<u1") if kind == KIND_MASK else np.dtype("<f4")


def _expected_payload_len(header: dict[str, Any]) -> int:
    w, h, d = header["dims"]
    p = w * h * d
    if header["kind"] == KIND_LOGITS:
        p *= header["num_classes"]
    return p * _payload_dtype(header["kind"]).itemsize


def write_volume(path: str, vol: Volume, meta: dict[str, Any] | None = None) -> None:
    header: dict[str, Any] = {
        "kind": KIND_VOLUME,
        "dims": list(vol.dims),
        "spacing": list(vol.spacing) if vol.spacing is not None else None,
        "dtype": "f4",
    }
    if meta:
        header["meta"] = meta
    payload = vol.flat().astype("<f4").tobytes()
    _atomic_write(path, _encode(header, payload))


def write_logits(path: str, logits: LogitField, meta: dict[str, Any] | None = None) -> None:
    header: dict[str, Any] = {
        "kind": KIND_LOGITS,
        "dims": list(logits.dims),
        "num_classes": logits.num_classes,
        "dtype": "f4",
    }
    if meta:
        header["meta"] = meta
    payload = logits.flat().astype("<f4").tobytes()
    _atomic_write(path, _encode(header, payload))


def write_mask(path: str, mask: ClassMask, meta: dict[str, Any] | None = None) -> None:
    header: dict[str, Any] = {
        "kind": KIND_MASK,
        "dims": list(mask.dims),
        "dtype": "u1",
    }
    if meta:
        header["meta"] = meta
    payload = mask.flat().astype("<u1").tobytes()
    _atomic_write(path, _encode(header, payload))


def _read_raw(path: str) -> tuple[dict[str, Any], bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC):
        raise TruncatedPayloadError(f"{path}: truncated payload (file shorter than magic)")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    if len(blob) < len(MAGIC) + _LEN.size:
        raise TruncatedPayloadError(f"{path}: truncated payload (missing header length)")
    (hdr_len,) = _LEN.unpack_from(blob, len(MAGIC))
    body = len(MAGIC) + _LEN.size
    if len(blob) < body + hdr_len:
        raise TruncatedPayloadError(f"{path}: truncated payload (incomplete header)")
    try:
        header = json.loads(blob[body : body + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedPayloadError(f"{path}: unparseable header: {exc}") from exc
    payload = blob[body + hdr_len :]
    try:
        expected = _expected_payload_len(header)
    except (KeyError, TypeError, ValueError) as exc:
        raise TruncatedPayloadError(f"{path}: header missing required fields: {exc}") from exc
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{path}: size mismatch: payload {len(payload)} bytes, header implies {expected}"
        )
    return header, payload


def read_any(path: str):
    """Read a container and return (object, meta) for whatever kind it holds."""
    header, payload = _read_raw(path)
    kind = header["kind"]
    dims = tuple(header["dims"])
    meta = header.get("meta")
    flat = np.frombuffer(payload, dtype=_payload_dtype(kind))
    if kind == KIND_VOLUME:
        spacing = header.get("spacing")
        obj: Any = Volume.from_flat(flat, dims, spacing=tuple(spacing) if spacing else None)
    elif kind == KIND_LOGITS:
        obj = LogitField(dims=dims, num_classes=header["num_classes"], data=flat)
    elif kind == KIND_MASK:
        obj = ClassMask(dims=dims, data=flat.reshape((dims[2], dims[1], dims[0])))
    else:
        raise TruncatedPayloadError(f"{path}: unknown container kind {kind!r}")
    return obj, meta


def read_volume(path: str) -> Volume:
    obj, _ = read_any(path)
    if not isinstance(obj, Volume):
        raise ContainerError(f"{path}: expected a volume container")
    return obj


def read_logits(path: str) -> LogitField:
    obj, _ = read_any(path)
    if not isinstance(obj, LogitField):
        raise ContainerError(f"{path}: expected a logits container")
    return obj


def read_mask(path: str) -> ClassMask:
    obj, _ = read_any(path)
    if not isinstance(obj, ClassMask):
        raise ContainerError(f"{path}: expected a mask container")
    return obj
