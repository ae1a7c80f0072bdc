"""
Little-endian binary record helpers shared by the reference-set and index files.

Files end with a SHA-256 digest of every preceding byte; readers verify it
before decoding anything, so a damaged file never yields partial state.
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

DIGEST_SIZE = 32


class BinaryWriter:
    """Accumulates records in memory and writes them with a trailing checksum."""

    def __init__(self, magic):
        self.parts = [magic]

    def u32(self, value):
        self.parts.append(struct.pack("<I", value))

    def u64(self, value):
        self.parts.append(struct.pack("<Q", value))

    def i64(self, value):
        self.parts.append(struct.pack("<q", value))

    def blob(self, data):
        self.u64(len(data))
        self.parts.append(data)

    def text(self, value):
        self.blob(value.encode("utf-8"))

    def json(self, payload):
        self.text(json.dumps(payload, sort_keys=True, separators=(",", ":")))

    def texts(self, values):
        self.u64(len(values))
        for value in values:
            self.text(value)

    def array(self, values, dtype):
        arr = np.ascontiguousarray(values, dtype=np.dtype(dtype).newbyteorder("<"))
        self.u64(arr.size)
        self.parts.append(arr.tobytes())

    def save(self, path):
        body = b"".join(self.parts)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(body + hashlib.sha256(body).digest())
        return len(body) + DIGEST_SIZE


class BinaryReader:
    """Cursor over a checksum-verified file; every read checks bounds."""

    def __init__(self, path, magic, error_cls):
        self.error_cls = error_cls
        path = Path(path)
        if not path.exists():
            raise error_cls(f"file not found: {path}")
        data = path.read_bytes()
        if len(data) < len(magic) + DIGEST_SIZE or not data.startswith(magic):
            raise error_cls(f"{path}: bad magic, not a {magic.rstrip(bytes(1)).decode()} file")
        body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
        if hashlib.sha256(body).digest() != digest:
            raise error_cls(f"{path}: checksum mismatch (truncated or corrupted file)")
        self.data = body
        self.pos = len(magic)

    def _take(self, size):
        if self.pos + size > len(self.data):
            raise self.error_cls("unexpected end of file")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self):
        return struct.unpack("<q", self._take(8))[0]

    def blob(self):
        return self._take(self.u64())

    def text(self):
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.error_cls(f"invalid text record: {exc}") from None

    def json(self):
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as exc:
            raise self.error_cls(f"invalid manifest: {exc}") from None

    def texts(self):
        return [self.text() for _ in range(self.u64())]

    def array(self, dtype, shape=None):
        dtype = np.dtype(dtype).newbyteorder("<")
        size = self.u64()
        arr = np.frombuffer(self._take(size * dtype.itemsize), dtype=dtype).astype(dtype.newbyteorder("="))
        if shape is not None:
            if int(np.prod(shape)) != size:
                raise self.error_cls(f"array of {size} items does not fit shape {shape}")
            arr = arr.reshape(shape)
        return arr

    def finish(self):
        if self.pos != len(self.data):
            raise self.error_cls(f"{len(self.data) - self.pos} trailing bytes after last record")
