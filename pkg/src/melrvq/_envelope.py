"""Little-endian binary envelope: magic, u32 version, payload, trailing CRC32."""

import struct
import zlib

from .errors import ChecksumError, FormatError, TruncatedFileError, VersionMismatchError


def seal(magic, version, payload):
    body = magic + struct.pack("<I", version) + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def open_envelope(blob, magic, version):
    """Validate ``blob`` and return its payload bytes (between header and CRC)."""
    if len(blob) < len(magic) + 8:
        raise TruncatedFileError(f"{len(blob)} bytes is too short for a {magic!r} file")
    if blob[: len(magic)] != magic:
        raise FormatError(f"bad magic {blob[:len(magic)]!r}, expected {magic!r}")
    (found,) = struct.unpack_from("<I", blob, len(magic))
    if found != version:
        raise VersionMismatchError(f"{magic.decode()} version {found}, expected {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{magic.decode()} checksum mismatch")
    return body[len(magic) + 4:]


class Reader:
    """Sequential reader over a payload that raises TruncatedFileError on overrun."""

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError("payload ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing payload bytes")
