#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Binary wire format shared by broker and clients.

Every frame is ``kind (1 byte) | body length (4 bytes, big endian) | body``, with the
body capped at 1 MiB. Strings inside bodies are 2-byte big-endian length-prefixed UTF-8.

=============  ====  =====================================================
kind           code  body
=============  ====  =====================================================
CONNECT        0x01  client id string
CONNACK        0x02  empty
SUBSCRIBE      0x03  topic string
SUBACK         0x04  topic string
PUBLISH        0x05  topic string, then IV | ciphertext (rest of body)
MESSAGE        0x06  topic string, then IV | ciphertext (rest of body)
HANDSHAKE_REQ  0x07  wrapped client key, exactly 256 bytes
HANDSHAKE_ACK  0x08  IV | ciphertext
ERROR          0x09  one code byte: 1 UNAUTHORIZED, 2 MALFORMED, 3 NO_KEY, 4 INTERNAL
PINGREQ        0x0A  empty
PINGRESP       0x0B  empty
=============  ====  =====================================================

The broker answers the packets of one session strictly in order. PUBLISH has no
acknowledgement and produces at most one ERROR, so clients put a PINGREQ in front of a
request to separate those ERRORs from the request's own reply.
"""

import asyncio
import struct
import unicodedata
from dataclasses import dataclass
from enum import IntEnum

from mqttz.MqttzErrors import MalformedPacket, OversizePacket, ERROR_NAMES

MAX_BODY = 1 << 20
HEADER = struct.Struct('>BI')
STR_LEN = struct.Struct('>H')
IV_LEN = 16
BLOCK_LEN = 16
WRAPPED_KEY_LEN = 256
MAX_CLIENT_ID = 64
MAX_TOPIC = 256
HANDSHAKE_TOPIC = 'mqttz/handshake'


class PacketKind(IntEnum):
    CONNECT = 0x01
    CONNACK = 0x02
    SUBSCRIBE = 0x03
    SUBACK = 0x04
    PUBLISH = 0x05
    MESSAGE = 0x06
    HANDSHAKE_REQ = 0x07
    HANDSHAKE_ACK = 0x08
    ERROR = 0x09
    PINGREQ = 0x0A
    PINGRESP = 0x0B


_TOPIC_KINDS = (PacketKind.SUBSCRIBE, PacketKind.SUBACK)
_ENVELOPE_TOPIC_KINDS = (PacketKind.PUBLISH, PacketKind.MESSAGE)
_EMPTY_KINDS = (PacketKind.CONNACK, PacketKind.PINGREQ, PacketKind.PINGRESP)


class ClientId(str):
    """Validated client identifier; build with `validate_client_id`."""
    __slots__ = ()


class TopicName(str):
    """Validated topic name; build with `validate_topic`."""
    __slots__ = ()

    @property
    def reserved(self):
        """True for the handshake topic, which nobody may subscribe to."""
        return str(self) == HANDSHAKE_TOPIC

    @property
    def segments(self):
        return str(self).split('/')


def _has_control(s):
    return any(unicodedata.category(ch) == 'Cc' for ch in s)


def validate_client_id(s):
    """
    Check a client id: 1..64 UTF-8 bytes, no '/', '#', '+' or control characters.

    :param string s: candidate id
    :return: ClientId
    :raises MalformedPacket: if any rule is violated
    """
    if not isinstance(s, str):
        raise MalformedPacket('client id must be a string')
    n = len(s.encode('utf-8'))
    if n < 1 or n > MAX_CLIENT_ID:
        raise MalformedPacket('client id must be 1..%d bytes, got %d' % (MAX_CLIENT_ID, n))
    if any(c in s for c in '/#+') or _has_control(s):
        raise MalformedPacket('client id contains a forbidden character')
    return ClientId(s)


def validate_topic(s):
    """
    Check a topic name: 1..256 UTF-8 bytes, '/'-separated non-empty segments, no
    wildcard or control characters. The handshake topic is valid but flagged reserved.

    :param string s: candidate topic
    :return: TopicName
    :raises MalformedPacket: if any rule is violated
    """
    if not isinstance(s, str):
        raise MalformedPacket('topic must be a string')
    n = len(s.encode('utf-8'))
    if n < 1 or n > MAX_TOPIC:
        raise MalformedPacket('topic must be 1..%d bytes, got %d' % (MAX_TOPIC, n))
    if any(seg == '' for seg in s.split('/')):
        raise MalformedPacket('topic %r has an empty segment' % s)
    if '#' in s or '+' in s or _has_control(s):
        raise MalformedPacket('topic %r contains a forbidden character' % s)
    return TopicName(s)


@dataclass(frozen=True)
class EncryptedEnvelope:
    """
    IV plus AES-CBC ciphertext. Outside the crypto and trusted core modules an envelope
    is only ever copied around, never looked into.

    :var bytes iv: 16 bytes
    :var bytes ciphertext: positive multiple of 16 bytes
    """
    iv: bytes
    ciphertext: bytes

    def __post_init__(self):
        object.__setattr__(self, 'iv', bytes(self.iv))
        object.__setattr__(self, 'ciphertext', bytes(self.ciphertext))
        if len(self.iv) != IV_LEN:
            raise MalformedPacket('envelope IV must be %d bytes, got %d' % (IV_LEN, len(self.iv)))
        if len(self.ciphertext) < BLOCK_LEN or len(self.ciphertext) % BLOCK_LEN:
            raise MalformedPacket('envelope ciphertext length %d is not a positive multiple of %d'
                                  % (len(self.ciphertext), BLOCK_LEN))

    def to_bytes(self):
        return self.iv + self.ciphertext

    @classmethod
    def from_bytes(cls, buf):
        buf = bytes(buf)
        return cls(iv=buf[:IV_LEN], ciphertext=buf[IV_LEN:])

    def __len__(self):
        return IV_LEN + len(self.ciphertext)

    def __repr__(self):
        return 'EncryptedEnvelope(<%d bytes>)' % len(self)


@dataclass(frozen=True)
class Packet:
    """
    One protocol message. Only the fields used by `kind` are set; see the module
    docstring for the per-kind layout.
    """
    kind: PacketKind
    client_id: str = None
    topic: str = None
    envelope: EncryptedEnvelope = None
    wrapped_key: bytes = None
    error_code: int = None

    @classmethod
    def connect(cls, client_id):
        return cls(PacketKind.CONNECT, client_id=client_id)

    @classmethod
    def connack(cls):
        return cls(PacketKind.CONNACK)

    @classmethod
    def subscribe(cls, topic):
        return cls(PacketKind.SUBSCRIBE, topic=topic)

    @classmethod
    def suback(cls, topic):
        return cls(PacketKind.SUBACK, topic=topic)

    @classmethod
    def publish(cls, topic, envelope):
        return cls(PacketKind.PUBLISH, topic=topic, envelope=envelope)

    @classmethod
    def message(cls, topic, envelope):
        return cls(PacketKind.MESSAGE, topic=topic, envelope=envelope)

    @classmethod
    def handshake_req(cls, wrapped_key):
        return cls(PacketKind.HANDSHAKE_REQ, wrapped_key=bytes(wrapped_key))

    @classmethod
    def handshake_ack(cls, envelope):
        return cls(PacketKind.HANDSHAKE_ACK, envelope=envelope)

    @classmethod
    def error(cls, code):
        return cls(PacketKind.ERROR, error_code=code)

    @classmethod
    def pingreq(cls):
        return cls(PacketKind.PINGREQ)

    @classmethod
    def pingresp(cls):
        return cls(PacketKind.PINGRESP)

    def __repr__(self):
        kind = PacketKind(self.kind).name
        if self.kind == PacketKind.ERROR:
            return 'Packet(ERROR %s)' % ERROR_NAMES.get(self.error_code, self.error_code)
        parts = [kind]
        if self.client_id is not None:
            parts.append('client_id=%r' % self.client_id)
        if self.topic is not None:
            parts.append('topic=%r' % self.topic)
        if self.envelope is not None:
            parts.append('envelope=<%d bytes>' % len(self.envelope))
        if self.wrapped_key is not None:
            parts.append('wrapped_key=<%d bytes>' % len(self.wrapped_key))
        return 'Packet(%s)' % ' '.join(parts)


def _pack_str(s):
    raw = s.encode('utf-8')
    return STR_LEN.pack(len(raw)) + raw


def _unpack_str(body, offset):
    if len(body) - offset < STR_LEN.size:
        raise MalformedPacket('truncated string length')
    (n,) = STR_LEN.unpack_from(body, offset)
    offset += STR_LEN.size
    if len(body) - offset < n:
        raise MalformedPacket('truncated string')
    try:
        s = bytes(body[offset:offset + n]).decode('utf-8')
    except UnicodeDecodeError:
        raise MalformedPacket('invalid UTF-8 string')
    return s, offset + n


def _check_envelope(env):
    if not isinstance(env, EncryptedEnvelope):
        raise MalformedPacket('envelope missing')
    return env


def _encode_body(p):
    kind = p.kind
    if kind == PacketKind.CONNECT:
        return _pack_str(validate_client_id(p.client_id))
    if kind in _EMPTY_KINDS:
        return b''
    if kind in _TOPIC_KINDS:
        return _pack_str(validate_topic(p.topic))
    if kind in _ENVELOPE_TOPIC_KINDS:
        return _pack_str(validate_topic(p.topic)) + _check_envelope(p.envelope).to_bytes()
    if kind == PacketKind.HANDSHAKE_REQ:
        if p.wrapped_key is None or len(p.wrapped_key) != WRAPPED_KEY_LEN:
            raise MalformedPacket('wrapped key must be %d bytes' % WRAPPED_KEY_LEN)
        return bytes(p.wrapped_key)
    if kind == PacketKind.HANDSHAKE_ACK:
        return _check_envelope(p.envelope).to_bytes()
    if kind == PacketKind.ERROR:
        if p.error_code not in ERROR_NAMES:
            raise MalformedPacket('unknown error code %r' % (p.error_code,))
        return bytes([p.error_code])
    raise MalformedPacket('unknown packet kind %r' % (kind,))


def encode_packet(p):
    """
    Encode a packet into one frame.

    :param Packet p: packet satisfying the per-kind invariants
    :return: bytes -- kind, big-endian body length, body
    :raises MalformedPacket: if a field violates its invariant
    :raises OversizePacket: if the body would exceed 1 MiB
    """
    body = _encode_body(p)
    if len(body) > MAX_BODY:
        raise OversizePacket('body of %d bytes exceeds %d' % (len(body), MAX_BODY))
    return HEADER.pack(int(p.kind), len(body)) + body


def _decode_body(kind, body):
    if kind == PacketKind.CONNECT:
        s, end = _unpack_str(body, 0)
        if end != len(body):
            raise MalformedPacket('trailing bytes after client id')
        return Packet.connect(validate_client_id(s))
    if kind in _EMPTY_KINDS:
        if len(body):
            raise MalformedPacket('%s carries no body' % kind.name)
        return Packet(kind)
    if kind in _TOPIC_KINDS:
        s, end = _unpack_str(body, 0)
        if end != len(body):
            raise MalformedPacket('trailing bytes after topic')
        return Packet(kind, topic=validate_topic(s))
    if kind in _ENVELOPE_TOPIC_KINDS:
        s, end = _unpack_str(body, 0)
        return Packet(kind, topic=validate_topic(s), envelope=EncryptedEnvelope.from_bytes(body[end:]))
    if kind == PacketKind.HANDSHAKE_REQ:
        if len(body) != WRAPPED_KEY_LEN:
            raise MalformedPacket('wrapped key must be %d bytes, got %d' % (WRAPPED_KEY_LEN, len(body)))
        return Packet.handshake_req(body)
    if kind == PacketKind.HANDSHAKE_ACK:
        return Packet.handshake_ack(EncryptedEnvelope.from_bytes(body))
    # ERROR
    if len(body) != 1 or body[0] not in ERROR_NAMES:
        raise MalformedPacket('ERROR body must be one known code byte')
    return Packet.error(body[0])


def decode_packet(buf):
    """
    Decode exactly one complete frame.

    :param bytes buf: the frame
    :return: Packet
    :raises MalformedPacket: unknown kind, truncated body, length mismatch, invalid UTF-8
                             or any field invariant violation
    """
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        raise MalformedPacket('frame shorter than header')
    kind, length = HEADER.unpack_from(buf, 0)
    try:
        kind = PacketKind(kind)
    except ValueError:
        raise MalformedPacket('unknown packet kind 0x%02x' % kind)
    if length > MAX_BODY:
        raise MalformedPacket('declared body length %d exceeds %d' % (length, MAX_BODY))
    if length != len(buf) - HEADER.size:
        raise MalformedPacket('declared body length %d, got %d' % (length, len(buf) - HEADER.size))
    return _decode_body(kind, buf[HEADER.size:])


async def read_frame(reader):
    """
    Read one complete raw frame from a stream.

    :param asyncio.StreamReader reader: stream
    :return: bytes, or None on a clean end of stream
    :raises MalformedPacket: on an oversized declared length or a frame cut mid-way
    """
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise MalformedPacket('stream ended inside a frame header')
    _, length = HEADER.unpack(header)
    if length > MAX_BODY:
        raise MalformedPacket('declared body length %d exceeds %d' % (length, MAX_BODY))
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise MalformedPacket('stream ended inside a frame body')
    return header + body


async def read_packet(reader):
    """
    Read and decode one packet; None on a clean end of stream.
    """
    frame = await read_frame(reader)
    if frame is None:
        return None
    return decode_packet(frame)
