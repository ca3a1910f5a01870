"""Length-prefixed binary protocol for talking to a model process.

Every frame is ``A2XP`` + u8 message type + u64 little-endian payload length
+ payload. The conversation is strictly request/response:

* HELLO (empty) -> INFO (JSON: name, dims, num_classes)
* FORWARD (p float32 voxels) -> LOGITS (p*l float32, voxel-major then class)
* GRADIENT (u32 class index + p float32 voxels + p uint8 mask)
  -> GRAD (p float32): gradient of the mask-aggregated class score
* any failure -> ERROR (UTF-8 text)

The client raises ModelTransportError for ERROR replies, bad magic, truncated
frames, and reply types that do not match the request.
"""

from __future__ import annotations

import json
import socket
import struct
import subprocess
from enum import IntEnum
from typing import BinaryIO

import numpy as np

from .volume import ClassMask, Dims, LogitField, Volume

MAGIC = b"A2XP"
_HEADER = struct.Struct("<4sBQ")
_CLASS = struct.Struct("<I")

# Corrupt length fields should fail fast, not trigger a giant allocation.
MAX_PAYLOAD = 1 << 30


class MsgType(IntEnum):
    HELLO = 1
    INFO = 2
    FORWARD = 3
    LOGITS = 4
    GRADIENT = 5
    GRAD = 6
    ERROR = 255


class ModelTransportError(RuntimeError):
    """Protocol violation or server-reported failure."""


def write_frame(stream: BinaryIO, msg_type: int, payload: bytes = b"") -> None:
    stream.write(_HEADER.pack(MAGIC, msg_type, len(payload)))
    if payload:
        stream.write(payload)
    stream.flush()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise ModelTransportError(f"truncated frame: expected {n} bytes, stream ended {remaining} short")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> tuple[int, bytes]:
    header = _read_exact(stream, _HEADER.size)
    magic, msg_type, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ModelTransportError(f"bad magic {magic!r}")
    if payload_len > MAX_PAYLOAD:
        raise ModelTransportError(f"frame payload of {payload_len} bytes exceeds cap {MAX_PAYLOAD}")
    payload = _read_exact(stream, payload_len) if payload_len else b""
    return msg_type, payload


class RemoteModel:
    """Client handle for a model process reachable over a byte stream pair.

    Not thread safe: the protocol is one request in flight at a time, so
    concurrent callers must each hold their own connection.
    """

    def __init__(self, rfile: BinaryIO, wfile: BinaryIO, owner=None):
        self._rfile = rfile
        self._wfile = wfile
        self._owner = owner
        info = self._call(MsgType.HELLO, b"", MsgType.INFO)
        try:
            meta = json.loads(info.decode("utf-8"))
            self.name = str(meta.get("name", "remote"))
            self.dims: Dims = tuple(int(d) for d in meta["dims"])  # type: ignore[assignment]
            self.num_classes = int(meta["num_classes"])
            self.has_gradient = bool(meta.get("has_gradient", True))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelTransportError(f"malformed INFO payload: {exc}") from exc
        if len(self.dims) != 3 or self.num_classes < 2:
            raise ModelTransportError(f"implausible INFO: dims={self.dims} num_classes={self.num_classes}")

    @classmethod
    def connect_tcp(cls, host: str, port: int, timeout: float = 30.0) -> "RemoteModel":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ModelTransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.settimeout(timeout)
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")
        return cls(rfile, wfile, owner=sock)

    @classmethod
    def spawn(cls, argv: list[str]) -> "RemoteModel":
        """Launch ``argv`` as a child process and speak the protocol on its stdio."""
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise ModelTransportError(f"cannot launch {argv[0]!r}: {exc}") from exc
        assert proc.stdin is not None and proc.stdout is not None
        return cls(proc.stdout, proc.stdin, owner=proc)

    def _call(self, req_type: MsgType, payload: bytes, want: MsgType) -> bytes:
        try:
            write_frame(self._wfile, req_type, payload)
            msg_type, reply = read_frame(self._rfile)
        except (OSError, ValueError) as exc:
            raise ModelTransportError(f"transport failure during {req_type.name}: {exc}") from exc
        if msg_type == MsgType.ERROR:
            raise ModelTransportError(f"server error: {reply.decode('utf-8', 'replace')}")
        if msg_type != want:
            raise ModelTransportError(f"expected {want.name} reply to {req_type.name}, got type {msg_type}")
        return reply

    def _check_dims(self, dims: Dims) -> None:
        if dims != self.dims:
            raise ModelTransportError(f"volume dims {dims} != model dims {self.dims}")

    def forward(self, vol: Volume) -> LogitField:
        self._check_dims(vol.dims)
        payload = vol.flat().astype("<f4").tobytes()
        reply = self._call(MsgType.FORWARD, payload, MsgType.LOGITS)
        expected = vol.num_voxels * self.num_classes * 4
        if len(reply) != expected:
            raise ModelTransportError(f"LOGITS payload {len(reply)} bytes, expected {expected}")
        flat = np.frombuffer(reply, dtype="<f4")
        return LogitField(dims=vol.dims, num_classes=self.num_classes, data=flat)

    def gradient(self, vol: Volume, class_index: int, mask: ClassMask) -> np.ndarray:
        """Flat float64 gradient of sum(logits[:, class_index] * mask) w.r.t. the input."""
        if not self.has_gradient:
            raise ModelTransportError(f"model {self.name!r} does not expose gradients")
        self._check_dims(vol.dims)
        if mask.dims != vol.dims:
            raise ModelTransportError(f"mask dims {mask.dims} != volume dims {vol.dims}")
        if not 0 <= class_index < self.num_classes:
            raise ModelTransportError(f"class index {class_index} out of range [0, {self.num_classes})")
        payload = (
            _CLASS.pack(class_index)
            + vol.flat().astype("<f4").tobytes()
            + mask.flat().astype("<u1").tobytes()
        )
        reply = self._call(MsgType.GRADIENT, payload, MsgType.GRAD)
        expected = vol.num_voxels * 4
        if len(reply) != expected:
            raise ModelTransportError(f"GRAD payload {len(reply)} bytes, expected {expected}")
        return np.frombuffer(reply, dtype="<f4").astype(np.float64)

    def close(self) -> None:
        for stream in (self._wfile, self._rfile):
            try:
                stream.close()
            except OSError:
                pass
        owner = self._owner
        if isinstance(owner, socket.socket):
            owner.close()
        elif isinstance(owner, subprocess.Popen):
            try:
                owner.wait(timeout=5)
            except subprocess.TimeoutExpired:
                owner.kill()
                owner.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(model, rfile: BinaryIO, wfile: BinaryIO) -> None:
    """Answer protocol requests against ``model`` until the peer closes.

    ``model`` needs dims, num_classes, name, forward(Volume) -> LogitField,
    and gradient(Volume, class_index, ClassMask) -> flat float array.
    Malformed requests get an ERROR reply; the loop keeps serving.
    """
    p = model.dims[0] * model.dims[1] * model.dims[2]
    while True:
        try:
            msg_type, payload = read_frame(rfile)
        except ModelTransportError:
            return  # peer hung up or corrupted the stream; nothing sane to reply to
        try:
            if msg_type == MsgType.HELLO:
                info = {
                    "dims": list(model.dims),
                    "has_gradient": bool(getattr(model, "has_gradient", True)),
                    "name": model.name,
                    "num_classes": model.num_classes,
                }
                write_frame(wfile, MsgType.INFO, json.dumps(info, sort_keys=True).encode("utf-8"))
            elif msg_type == MsgType.FORWARD:
                if len(payload) != p * 4:
                    raise ValueError(f"FORWARD payload {len(payload)} bytes, expected {p * 4}")
                vol = Volume.from_flat(np.frombuffer(payload, dtype="<f4"), model.dims)
                logits = model.forward(vol)
                write_frame(wfile, MsgType.LOGITS, logits.flat().astype("<f4").tobytes())
            elif msg_type == MsgType.GRADIENT:
                if len(payload) != _CLASS.size + p * 5:
                    raise ValueError(f"GRADIENT payload {len(payload)} bytes, expected {_CLASS.size + p * 5}")
                (class_index,) = _CLASS.unpack_from(payload)
                voxels = np.frombuffer(payload, dtype="<f4", count=p, offset=_CLASS.size)
                mask_bytes = np.frombuffer(payload, dtype="<u1", offset=_CLASS.size + p * 4)
                vol = Volume.from_flat(voxels, model.dims)
                mask = ClassMask(dims=model.dims, data=mask_bytes.reshape((model.dims[2], model.dims[1], model.dims[0])))
                grad = model.gradient(vol, class_index, mask)
                write_frame(wfile, MsgType.GRAD, np.asarray(grad).astype("<f4").tobytes())
            else:
                write_frame(wfile, MsgType.ERROR, f"unknown message type {msg_type}".encode("utf-8"))
        except BrokenPipeError:
            return
        except Exception as exc:  # noqa: BLE001 - every request failure maps to ERROR
            try:
                write_frame(wfile, MsgType.ERROR, str(exc).encode("utf-8"))
            except OSError:
                return
