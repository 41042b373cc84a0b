import asyncio
import unittest

import numpy as np

import generate_data
from mqttz.MqttzErrors import (MalformedPacket, NoKey, OversizePacket, StoreIOError, UnsealFailed, Unauthorized,
                               ERROR_NAMES, wire_code)
from mqttz.MqttzProtocol import (EncryptedEnvelope, Packet, PacketKind, HEADER, MAX_BODY, STR_LEN,
                                 decode_packet, encode_packet, read_frame, read_packet,
                                 validate_client_id, validate_topic)


def _envelope(n_blocks):
    return EncryptedEnvelope(iv=np.random.bytes(16), ciphertext=np.random.bytes(16 * n_blocks))


class MqttzProtocolTestCase(unittest.TestCase):

    def test_connect_bytes(self):
        self.assertEqual(encode_packet(Packet.connect('a')), bytes([0x01, 0, 0, 0, 3, 0, 1, 0x61]))
        self.assertEqual(encode_packet(Packet.connack()), bytes([0x02, 0, 0, 0, 0]))
        self.assertEqual(encode_packet(Packet.error(3)), bytes([0x09, 0, 0, 0, 1, 3]))
        self.assertEqual(encode_packet(Packet.pingreq()), bytes([0x0A, 0, 0, 0, 0]))
        self.assertEqual(decode_packet(bytes([0x0B, 0, 0, 0, 0])), Packet.pingresp())
        with self.assertRaises(MalformedPacket):
            decode_packet(bytes([0x0A, 0, 0, 0, 1, 0]))

    def test_round_trip_random_packets(self):
        np.random.seed(42)
        ids = generate_data.generate_client_ids(20)
        topics = generate_data.generate_topics(20)
        for i in range(1000):
            kind = PacketKind(np.random.randint(1, 12))
            if kind == PacketKind.CONNECT:
                p = Packet.connect(ids[i % 20])
            elif kind == PacketKind.CONNACK:
                p = Packet.connack()
            elif kind in (PacketKind.SUBSCRIBE, PacketKind.SUBACK):
                p = Packet(kind, topic=topics[i % 20])
            elif kind in (PacketKind.PUBLISH, PacketKind.MESSAGE):
                p = Packet(kind, topic=topics[i % 20], envelope=_envelope(np.random.randint(1, 20)))
            elif kind == PacketKind.HANDSHAKE_REQ:
                p = Packet.handshake_req(np.random.bytes(256))
            elif kind == PacketKind.HANDSHAKE_ACK:
                p = Packet.handshake_ack(_envelope(2))
            elif kind in (PacketKind.PINGREQ, PacketKind.PINGRESP):
                p = Packet(kind)
            else:
                p = Packet.error(int(np.random.choice(list(ERROR_NAMES))))
            frame = encode_packet(p)
            self.assertEqual(len(frame), HEADER.size + HEADER.unpack_from(frame)[1])
            self.assertEqual(decode_packet(frame), p)

    def test_unknown_kind(self):
        with self.assertRaises(MalformedPacket):
            decode_packet(bytes([0xFF, 0, 0, 0, 0]))
        with self.assertRaises(MalformedPacket):
            decode_packet(bytes([0x00, 0, 0, 0, 0]))

    def test_envelope_invariants(self):
        with self.assertRaises(MalformedPacket):
            EncryptedEnvelope(iv=bytes(16), ciphertext=bytes(8))
        with self.assertRaises(MalformedPacket):
            EncryptedEnvelope(iv=bytes(16), ciphertext=b'')
        with self.assertRaises(MalformedPacket):
            EncryptedEnvelope(iv=bytes(12), ciphertext=bytes(16))
        env = EncryptedEnvelope.from_bytes(bytes(48))
        self.assertEqual(len(env), 48)
        self.assertEqual(len(env.ciphertext), 32)

        # PUBLISH with an 8-byte ciphertext on the wire
        body = STR_LEN.pack(1) + b't' + bytes(16) + bytes(8)
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.PUBLISH, len(body)) + body)

    def test_topic_validation(self):
        for bad in ['', 'a//b', '/a', 'a/', 'a/+/b', 'a/#', 'x' * 257, 'a\x00b', 'tab\tbed']:
            with self.assertRaises(MalformedPacket):
                validate_topic(bad)
        self.assertEqual(validate_topic('x' * 256), 'x' * 256)
        self.assertEqual(validate_topic('hospital/floor1/patient01/ecg').segments,
                         ['hospital', 'floor1', 'patient01', 'ecg'])
        self.assertTrue(validate_topic('mqttz/handshake').reserved)
        self.assertFalse(validate_topic('mqttz/handshake2').reserved)
        # multi-byte characters count in bytes
        with self.assertRaises(MalformedPacket):
            validate_topic('é' * 129)

        with self.assertRaises(MalformedPacket):
            encode_packet(Packet.subscribe(''))

    def test_client_id_validation(self):
        for bad in ['', 'a/b', 'a#', 'a+', 'x' * 65, 'new\nline']:
            with self.assertRaises(MalformedPacket):
                validate_client_id(bad)
        self.assertEqual(validate_client_id('x' * 64), 'x' * 64)
        with self.assertRaises(MalformedPacket):
            validate_client_id(None)

    def test_truncated_and_mismatched_frames(self):
        np.random.seed(42)
        frame = encode_packet(Packet.publish('a/b', _envelope(3)))
        for cut in (1, 4, 5, 10, len(frame) - 1):
            with self.assertRaises(MalformedPacket):
                decode_packet(frame[:cut])
        with self.assertRaises(MalformedPacket):
            decode_packet(frame + b'\x00')
        # declared length above the cap
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.CONNECT, MAX_BODY + 1))

    def test_trailing_bytes(self):
        body = STR_LEN.pack(1) + b't' + b'x'
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.SUBSCRIBE, len(body)) + body)
        body = STR_LEN.pack(1) + b'a' + b'x'
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.CONNECT, len(body)) + body)
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.CONNACK, 1) + b'x')
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.ERROR, 2) + b'\x01\x01')

    def test_invalid_utf8(self):
        body = STR_LEN.pack(2) + b'\xff\xfe'
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.SUBSCRIBE, len(body)) + body)

    def test_handshake_and_error_bodies(self):
        with self.assertRaises(MalformedPacket):
            encode_packet(Packet.handshake_req(bytes(255)))
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.HANDSHAKE_REQ, 255) + bytes(255))
        with self.assertRaises(MalformedPacket):
            encode_packet(Packet.error(5))
        with self.assertRaises(MalformedPacket):
            decode_packet(HEADER.pack(PacketKind.ERROR, 1) + b'\x05')

    def test_oversize(self):
        env = EncryptedEnvelope(iv=bytes(16), ciphertext=bytes(MAX_BODY))
        with self.assertRaises(OversizePacket):
            encode_packet(Packet.publish('big', env))
        # largest body that still fits
        n = (MAX_BODY - 2 - 3 - 16) // 16 * 16
        frame = encode_packet(Packet.publish('big', EncryptedEnvelope(iv=bytes(16), ciphertext=bytes(n))))
        self.assertLessEqual(len(frame) - HEADER.size, MAX_BODY)

    def test_repr_hides_contents(self):
        p = Packet.handshake_req(bytes(256))
        self.assertIn('<256 bytes>', repr(p))
        self.assertEqual(repr(Packet.error(2)), 'Packet(ERROR MALFORMED)')

    def test_read_frame(self):
        np.random.seed(42)
        frames = [encode_packet(Packet.connect('alice')),
                  encode_packet(Packet.publish('a/b', _envelope(2))),
                  encode_packet(Packet.error(1))]

        async def read_all(data):
            reader = asyncio.StreamReader()
            reader.feed_data(data)
            reader.feed_eof()
            out = []
            while True:
                pkt = await read_packet(reader)
                if pkt is None:
                    return out
                out.append(pkt)

        packets = asyncio.run(read_all(b''.join(frames)))
        self.assertEqual([p.kind for p in packets], [PacketKind.CONNECT, PacketKind.PUBLISH, PacketKind.ERROR])

        async def read_one(data):
            reader = asyncio.StreamReader()
            reader.feed_data(data)
            reader.feed_eof()
            return await read_frame(reader)

        self.assertIsNone(asyncio.run(read_one(b'')))
        with self.assertRaises(MalformedPacket):
            asyncio.run(read_one(frames[1][:3]))
        with self.assertRaises(MalformedPacket):
            asyncio.run(read_one(frames[1][:-1]))
        with self.assertRaises(MalformedPacket):
            asyncio.run(read_one(HEADER.pack(PacketKind.PUBLISH, MAX_BODY + 1)))

    def test_wire_codes(self):
        self.assertEqual(wire_code(Unauthorized('no')), 1)
        self.assertEqual(wire_code(MalformedPacket('bad')), 2)
        self.assertEqual(wire_code(OversizePacket('big')), 2)
        self.assertEqual(wire_code(NoKey('bob')), 3)
        self.assertEqual(wire_code(UnsealFailed('bob')), 3)
        self.assertEqual(wire_code(StoreIOError('disk')), 4)
        self.assertEqual(wire_code(RuntimeError()), 4)
        self.assertEqual(sorted(ERROR_NAMES), [1, 2, 3, 4])
