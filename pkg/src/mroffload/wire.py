"""Binary framing for every packet exchanged between nodes and the router.

Each packet is three sub-packets laid out back to back, all little-endian::

    magic        u32   0x414C4741 ("AGLA" on the wire)
    topic_len    u8
    topic        topic_len bytes, UTF-8, non-empty
    payload_type u8    PICTURE=1, U8PICTURE=2, POSE=3, CONTROL=4
    sequence     u64
    timestamp_us u64
    width        u16
    height       u16
    channels     u8
    encoding     u8    RAW=0, JPEG=1
    payload_len  u32   <= 64 MiB
    payload      payload_len bytes

See docs/PROTOCOL.md for the normative description and golden vectors.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAGIC = 0x414C4741
MAGIC_BYTES = struct.pack("<I", MAGIC)
MAX_TOPIC_BYTES = 255
MAX_PAYLOAD = 64 * 1024 * 1024

_PREFIX = struct.Struct("<IB")
_FIELDS = struct.Struct("<BQQHHBBI")
MIN_PACKET_SIZE = _PREFIX.size + 1 + _FIELDS.size

_POSE = struct.Struct("<7d")
POSE_PAYLOAD_SIZE = _POSE.size


class PayloadType(IntEnum):
    PICTURE = 1
    U8PICTURE = 2
    POSE = 3
    CONTROL = 4


class Encoding(IntEnum):
    RAW = 0
    JPEG = 1


class WireError(ValueError):
    """Base class for encode/decode failures."""


class BadMagic(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownPayloadType(WireError):
    pass


class UnknownEncoding(WireError):
    pass


class HeaderPayloadMismatch(WireError):
    pass


class TopicTooLong(WireError):
    pass


class InvalidTopic(WireError):
    pass


class PayloadTooLarge(WireError):
    pass


class TrailingBytes(WireError):
    pass


class UnsupportedChannelCount(WireError):
    pass


@dataclass(frozen=True)
class PacketHeader:
    payload_type: PayloadType
    sequence: int = 0
    timestamp_us: int = 0
    width: int = 0
    height: int = 0
    channels: int = 0
    encoding: Encoding = Encoding.RAW


@dataclass(frozen=True)
class FramePacket:
    topic: str
    header: PacketHeader
    payload: bytes = field(default=b"", repr=False)


@dataclass(frozen=True)
class PosePayload:
    """Position in meters and orientation as a unit quaternion (w, x, y, z)."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.orientation))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"orientation quaternion has norm {norm!r}, expected 1")


def encode_pose(pose: PosePayload) -> bytes:
    return _POSE.pack(*pose.position, *pose.orientation)


def decode_pose(data: bytes) -> PosePayload:
    if len(data) != POSE_PAYLOAD_SIZE:
        raise HeaderPayloadMismatch(f"pose payload must be {POSE_PAYLOAD_SIZE} bytes, got {len(data)}")
    values = _POSE.unpack(data)
    return PosePayload(tuple(values[:3]), tuple(values[3:]))


def _check_topic(topic_bytes: bytes) -> None:
    if not topic_bytes:
        raise InvalidTopic("topic must be non-empty")
    if len(topic_bytes) > MAX_TOPIC_BYTES:
        raise TopicTooLong(f"topic is {len(topic_bytes)} bytes, limit is {MAX_TOPIC_BYTES}")


def _binary_bytes(payload) -> bool:
    """True when every byte is 0 or 255 (255 + 1 wraps to 0, so only those map to <= 1)."""
    shifted = np.frombuffer(payload, dtype=np.uint8) + np.uint8(1)
    return int(shifted.max()) <= 1


def _check_consistency(header: PacketHeader, payload) -> None:
    n = len(payload)
    if n > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {n} bytes exceeds {MAX_PAYLOAD}")
    kind = header.payload_type
    if kind in (PayloadType.PICTURE, PayloadType.U8PICTURE):
        if kind is PayloadType.U8PICTURE and header.channels != 1:
            raise HeaderPayloadMismatch("U8PICTURE requires channels = 1")
        if header.encoding is Encoding.RAW:
            expected = header.width * header.height * header.channels
            if expected != n:
                raise HeaderPayloadMismatch(
                    f"{header.width}x{header.height}x{header.channels} needs {expected} bytes, payload has {n}"
                )
            if kind is PayloadType.U8PICTURE and n:
                if not _binary_bytes(payload):
                    raise HeaderPayloadMismatch("U8PICTURE mask values must be 0 or 255")
    elif kind is PayloadType.POSE:
        if n != POSE_PAYLOAD_SIZE:
            raise HeaderPayloadMismatch(f"pose payload must be {POSE_PAYLOAD_SIZE} bytes, got {n}")


def _fields(header: PacketHeader, payload_len: int) -> bytes:
    try:
        return _FIELDS.pack(
            header.payload_type,
            header.sequence,
            header.timestamp_us,
            header.width,
            header.height,
            header.channels,
            header.encoding,
            payload_len,
        )
    except struct.error as exc:
        raise WireError(f"header field out of range: {exc}") from None


def encode_packet(packet: FramePacket) -> bytes:
    """Serialize ``packet``; raises a :class:`WireError` subclass if it is invalid."""
    head, payload = encode_parts(packet)
    return head + payload if isinstance(payload, bytes) else b"".join((head, payload))


def encode_parts(packet: FramePacket) -> tuple[bytes, bytes]:
    """Validated (fixed part, payload) pair; sending both back to back equals :func:`encode_packet`."""
    header = packet.header
    if not isinstance(header.payload_type, PayloadType):
        header = _coerce_header(header)
    topic_bytes = packet.topic.encode("utf-8")
    _check_topic(topic_bytes)
    _check_consistency(header, packet.payload)
    head = b"".join((_PREFIX.pack(MAGIC, len(topic_bytes)), topic_bytes, _fields(header, len(packet.payload))))
    return head, packet.payload


def _coerce_header(header: PacketHeader) -> PacketHeader:
    try:
        kind = PayloadType(header.payload_type)
    except ValueError:
        raise UnknownPayloadType(f"payload_type {header.payload_type!r}") from None
    try:
        enc = Encoding(header.encoding)
    except ValueError:
        raise UnknownEncoding(f"encoding {header.encoding!r}") from None
    return PacketHeader(kind, header.sequence, header.timestamp_us, header.width, header.height, header.channels, enc)


def decode_prefix(data, offset: int = 0) -> tuple[FramePacket, int]:
    """Decode one packet starting at ``offset``; return it and the offset just past it.

    Never reads beyond the declared payload length, so ``data`` may hold further packets.
    """
    with memoryview(data) as view:
        return _decode_view(view, offset)


def _decode_view(view: memoryview, offset: int) -> tuple[FramePacket, int]:
    end = len(view)
    if end - offset < 4:
        if bytes(view[offset:end]) != MAGIC_BYTES[: end - offset]:
            raise BadMagic("bad magic in short prefix")
        raise Truncated(f"need at least {MIN_PACKET_SIZE} bytes, have {end - offset}")
    if view[offset : offset + 4] != MAGIC_BYTES:
        raise BadMagic(f"expected magic {MAGIC_BYTES.hex()}, got {bytes(view[offset:offset + 4]).hex()}")
    if end - offset < _PREFIX.size:
        raise Truncated("truncated in topic length")
    topic_len = view[offset + 4]
    pos = offset + _PREFIX.size
    if end - pos < topic_len + _FIELDS.size:
        raise Truncated("truncated inside topic or header")
    try:
        topic = str(view[pos : pos + topic_len], "utf-8")
    except UnicodeDecodeError:
        raise InvalidTopic("topic is not valid UTF-8") from None
    if not topic:
        raise InvalidTopic("empty topic")
    pos += topic_len
    kind, seq, ts, width, height, channels, enc, payload_len = _FIELDS.unpack_from(view, pos)
    pos += _FIELDS.size
    if payload_len > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload of {payload_len} bytes exceeds {MAX_PAYLOAD}")
    try:
        kind = PayloadType(kind)
    except ValueError:
        raise UnknownPayloadType(f"payload_type {kind}") from None
    try:
        enc = Encoding(enc)
    except ValueError:
        raise UnknownEncoding(f"encoding {enc}") from None
    if end - pos < payload_len:
        raise Truncated(f"payload needs {payload_len} bytes, {end - pos} available")
    payload = bytes(view[pos : pos + payload_len])
    header = PacketHeader(kind, seq, ts, width, height, channels, enc)
    _check_consistency(header, payload)
    return FramePacket(topic, header, payload), pos + payload_len


def decode_header_and_payload(head: bytes, payload) -> FramePacket:
    """Decode a frame whose fixed part and payload were read separately (no payload copy)."""
    topic_len = head[4]
    if len(head) != _PREFIX.size + topic_len + _FIELDS.size:
        raise Truncated("fixed part has the wrong length")
    if head[:4] != MAGIC_BYTES:
        raise BadMagic("bad magic")
    try:
        topic = head[5 : 5 + topic_len].decode("utf-8")
    except UnicodeDecodeError:
        raise InvalidTopic("topic is not valid UTF-8") from None
    if not topic:
        raise InvalidTopic("empty topic")
    kind, seq, ts, width, height, channels, enc, payload_len = _FIELDS.unpack_from(head, 5 + topic_len)
    if payload_len != len(payload):
        raise Truncated(f"payload needs {payload_len} bytes, got {len(payload)}")
    try:
        kind = PayloadType(kind)
    except ValueError:
        raise UnknownPayloadType(f"payload_type {kind}") from None
    try:
        enc = Encoding(enc)
    except ValueError:
        raise UnknownEncoding(f"encoding {enc}") from None
    header = PacketHeader(kind, seq, ts, width, height, channels, enc)
    _check_consistency(header, payload)
    return FramePacket(topic, header, payload)


def decode_packet(data) -> FramePacket:
    """Decode exactly one packet; trailing bytes are rejected."""
    packet, consumed = decode_prefix(data)
    if consumed != len(data):
        raise TrailingBytes(f"{len(data) - consumed} bytes after packet end")
    return packet


def decode_all(data) -> list[FramePacket]:
    """Decode a buffer holding zero or more concatenated packets."""
    packets = []
    offset = 0
    while offset < len(data):
        packet, offset = decode_prefix(data, offset)
        packets.append(packet)
    return packets


def frame_length(data, offset: int = 0) -> int | None:
    """Total encoded length of the packet at ``offset`` or None if the fixed part is incomplete."""
    if len(data) - offset < _PREFIX.size:
        return None
    fixed = _PREFIX.size + data[offset + 4] + _FIELDS.size
    if len(data) - offset < fixed:
        return None
    (payload_len,) = struct.unpack_from("<I", data, offset + fixed - 4)
    return fixed + payload_len


class StreamDecoder:
    """Incremental decoder for a TCP byte stream.

    Malformed packets are counted in :attr:`errors` and skipped. A bad magic
    triggers a scan for the next magic occurrence.
    """

    def __init__(self):
        self._buf = bytearray()
        self._pos = 0
        self.errors = 0
        self.last_error: WireError | None = None

    def feed(self, data: bytes, raw: bool = False) -> list:
        """Append ``data`` and return every complete packet now available.

        With ``raw=True`` each item is ``(packet, encoded_bytes)``.
        """
        buf = self._buf
        buf += data
        out = []
        while True:
            avail = len(buf) - self._pos
            if avail < 4:
                break
            if buf[self._pos : self._pos + 4] != MAGIC_BYTES:
                self._resync(BadMagic("bad magic"))
                continue
            total = frame_length(buf, self._pos)
            if total is None:
                break
            if total > MAX_PAYLOAD + MAX_TOPIC_BYTES + MIN_PACKET_SIZE:
                self._resync(PayloadTooLarge("declared payload too large"))
                continue
            if avail < total:
                break
            start = self._pos
            try:
                packet, end = decode_prefix(buf, start)
            except WireError as exc:
                self.errors += 1
                self.last_error = exc.with_traceback(None)
                self._pos = start + total
                continue
            self._pos = end
            if raw:
                out.append((packet, bytes(buf[start:end])))
            else:
                out.append(packet)
        self._compact()
        return out

    def _resync(self, exc: WireError) -> None:
        self.errors += 1
        self.last_error = exc
        nxt = self._buf.find(MAGIC_BYTES, self._pos + 1)
        if nxt < 0:
            self._pos = max(self._pos + 1, len(self._buf) - 3)
        else:
            self._pos = nxt

    def _compact(self) -> None:
        if self._pos and (self._pos == len(self._buf) or self._pos > (1 << 20)):
            del self._buf[: self._pos]
            self._pos = 0

    @property
    def buffered(self) -> int:
        return len(self._buf) - self._pos


def encode_picture(image: np.ndarray, encoding: Encoding = Encoding.RAW, quality: int = 85) -> bytes:
    """Pixel bytes for a PICTURE/U8PICTURE payload.

    RAW is row-major interleaved and bit-exact. JPEG is baseline sequential.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise WireError(f"pictures are 8-bit, got dtype {image.dtype}")
    channels = _channels_of(image)
    if encoding == Encoding.RAW:
        return np.ascontiguousarray(image).tobytes()
    if encoding == Encoding.JPEG:
        if not 1 <= quality <= 100:
            raise ValueError("JPEG quality must be within 1..100")
        from PIL import Image

        pixels = image.reshape(image.shape[0], image.shape[1]) if channels == 1 else image
        out = io.BytesIO()
        Image.fromarray(pixels, mode="L" if channels == 1 else "RGB").save(
            out, format="JPEG", quality=quality, progressive=False, optimize=False
        )
        return out.getvalue()
    raise UnknownEncoding(f"encoding {encoding!r}")


def decode_picture(data: bytes, width: int, height: int, channels: int, encoding: Encoding = Encoding.RAW) -> np.ndarray:
    """Inverse of :func:`encode_picture`; returns an (H, W, C) uint8 array."""
    if channels not in (1, 3):
        raise UnsupportedChannelCount(f"channels must be 1 or 3, got {channels}")
    if encoding == Encoding.RAW:
        if len(data) != width * height * channels:
            raise HeaderPayloadMismatch(f"{width}x{height}x{channels} does not match {len(data)} bytes")
        return np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    if encoding == Encoding.JPEG:
        from PIL import Image

        img = Image.open(io.BytesIO(data))
        img = img.convert("L" if channels == 1 else "RGB")
        pixels = np.asarray(img, dtype=np.uint8)
        if pixels.shape[:2] != (height, width):
            raise HeaderPayloadMismatch(f"JPEG is {pixels.shape[1]}x{pixels.shape[0]}, header says {width}x{height}")
        return pixels.reshape(height, width, channels)
    raise UnknownEncoding(f"encoding {encoding!r}")


def _channels_of(image: np.ndarray) -> int:
    if image.ndim == 2:
        return 1
    if image.ndim == 3 and image.shape[2] in (1, 3):
        return image.shape[2]
    raise UnsupportedChannelCount(f"image shape {image.shape} is not HxW, HxWx1 or HxWx3")


def picture_packet(
    topic: str,
    image: np.ndarray,
    *,
    sequence: int = 0,
    timestamp_us: int = 0,
    encoding: Encoding = Encoding.RAW,
    quality: int = 85,
    mask: bool = False,
) -> FramePacket:
    """Build a PICTURE (or U8PICTURE when ``mask``) packet from an image array."""
    image = np.asarray(image)
    channels = _channels_of(image)
    kind = PayloadType.U8PICTURE if mask else PayloadType.PICTURE
    header = PacketHeader(kind, sequence, timestamp_us, image.shape[1], image.shape[0], channels, Encoding(encoding))
    return FramePacket(topic, header, encode_picture(image, encoding, quality))


def packet_image(packet: FramePacket) -> np.ndarray:
    h = packet.header
    return decode_picture(packet.payload, h.width, h.height, h.channels, h.encoding)


# Control traffic shares the frame format: payload_type CONTROL, zero geometry,
# JSON object payload with at least an "op" key. Node-level ops use topic "$".
NODE_TOPIC = "$"


def control_packet(op: str, topic: str = NODE_TOPIC, sequence: int = 0, timestamp_us: int = 0, **fields) -> FramePacket:
    body = {"op": op, **fields}
    payload = json.dumps(body, separators=(",", ":")).encode("utf-8")
    return FramePacket(topic, PacketHeader(PayloadType.CONTROL, sequence, timestamp_us), payload)


def parse_control(packet: FramePacket) -> dict:
    try:
        body = json.loads(bytes(packet.payload).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"control payload is not JSON: {exc}") from None
    if not isinstance(body, dict) or not isinstance(body.get("op"), str):
        raise WireError("control payload must be an object with an 'op' string")
    return body
