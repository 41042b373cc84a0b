#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Publisher/subscriber client: the client half of the two-step handshake, payload
encryption before send and decryption on receive.
"""

import argparse
import asyncio
import base64
import logging
import ssl
import sys
import time
from collections import namedtuple

from mqttz.MqttzConfig import ClientConfig, DEFAULT_LISTEN
from mqttz.MqttzCrypto import decrypt_payload, encrypt_payload, wrap_client_key
from mqttz.MqttzErrors import (AckMismatch, BadPadding, HandshakeRejected, MqttzError, Unauthorized,
                               ERROR_NAMES, ERROR_UNAUTHORIZED)
from mqttz.MqttzLog import configure_logging, get_logger, log_event
from mqttz.MqttzProtocol import Packet, PacketKind, encode_packet, read_packet
from mqttz.MqttzTls import client_ssl_context
from mqttz.MqttzTrustedCore import ack_plaintext

log = get_logger('client')

Message = namedtuple('Message', ['topic', 'payload', 'received_ns'])
Message.__doc__ = 'A decrypted delivery; `received_ns` is `time.perf_counter_ns()` at frame arrival.'

_REPLY_KINDS = (PacketKind.CONNACK, PacketKind.SUBACK, PacketKind.HANDSHAKE_ACK, PacketKind.ERROR)


def _reply_error(pkt, what):
    if pkt.error_code == ERROR_UNAUTHORIZED:
        return Unauthorized('%s refused by broker' % what)
    return MqttzError('%s failed: broker replied ERROR(%s)' % (what, ERROR_NAMES.get(pkt.error_code)),
                      code=ERROR_NAMES.get(pkt.error_code))


class MqttzClient(object):
    """
    One client session.

    :var mqttz.ClientConfig config: settings
    :var bytes key: this client's 32-byte key (never sent except wrapped)
    :var list errors: ERROR codes the broker sent outside any request (eg after a denied publish)
    :var int bad_padding: deliveries that did not decrypt under `key`
    :var bool handshake_complete: True after a verified ACK
    """

    def __init__(self, config, key=None):
        """
        :param mqttz.ClientConfig config: settings
        :param bytes/NoneType key: explicit key; otherwise `config.load_key()`
        """
        self.config = config
        self.key = key if key is not None else config.load_key()
        self.errors = []
        self.bad_padding = 0
        self.handshake_complete = False
        self._reader = None
        self._writer = None
        self._reader_task = None
        self._messages = None
        self._waiter = None
        self._request_lock = None
        # publishes sent since the last PINGREQ, and PINGRESPs still to come
        self._unsettled = 0
        self._pings = 0

    @property
    def client_id(self):
        return self.config.client_id

    async def connect(self):
        """
        Open the (TLS) connection, verifying the broker certificate, and send CONNECT.

        :raises HandshakeRejected: if the broker refuses the CONNECT
        """
        ssl_ctx = client_ssl_context(self.config.ca_file) if self.config.tls else None
        kwargs = {'ssl': ssl_ctx}
        if ssl_ctx is not None:
            kwargs['server_hostname'] = self.config.server_hostname
        self._reader, self._writer = await asyncio.open_connection(self.config.host, self.config.port, **kwargs)
        self._messages = asyncio.Queue()
        self._request_lock = asyncio.Lock()
        await self.send_packet(Packet.connect(self.client_id))
        reply = await read_packet(self._reader)
        if reply is None:
            raise HandshakeRejected(0, 'broker closed the connection after CONNECT')
        if reply.kind == PacketKind.ERROR:
            raise HandshakeRejected(reply.error_code)
        if reply.kind != PacketKind.CONNACK:
            raise HandshakeRejected(0, 'expected CONNACK, got %s' % reply.kind.name)
        self._reader_task = asyncio.ensure_future(self._read_loop())
        return self

    async def send_packet(self, pkt):
        self._writer.write(encode_packet(pkt))
        await self._writer.drain()

    async def _read_loop(self):
        try:
            while True:
                pkt = await read_packet(self._reader)
                if pkt is None:
                    break
                if pkt.kind == PacketKind.MESSAGE:
                    self._messages.put_nowait((pkt, time.perf_counter_ns()))
                elif pkt.kind == PacketKind.PINGRESP:
                    self._pings = max(0, self._pings - 1)
                elif pkt.kind == PacketKind.ERROR and self._pings:
                    # answers a publish sent before the pending PINGREQ
                    self._unsolicited_error(pkt)
                elif pkt.kind in _REPLY_KINDS and self._waiter is not None and not self._waiter.done():
                    self._waiter.set_result(pkt)
                elif pkt.kind == PacketKind.ERROR:
                    self._unsolicited_error(pkt)
        except (MqttzError, ConnectionError, ssl.SSLError) as e:
            log_event(log, 'connection_lost', level=logging.WARNING, client_id=self.client_id, error=str(e))
        finally:
            if self._waiter is not None and not self._waiter.done():
                self._waiter.set_exception(ConnectionError('connection closed'))
            self._messages.put_nowait(None)

    def _unsolicited_error(self, pkt):
        self.errors.append(pkt.error_code)
        log_event(log, 'broker_error', client_id=self.client_id, code=ERROR_NAMES.get(pkt.error_code))

    async def _request(self, pkt, timeout):
        """
        Send `pkt` and wait for its reply. If publishes went out since the last request,
        a PINGREQ goes first in the same write; ERRORs that arrive before its PINGRESP
        belong to those publishes and land in `errors`.
        """
        async with self._request_lock:
            self._waiter = asyncio.get_running_loop().create_future()
            frames = encode_packet(pkt)
            if self._unsettled:
                frames = encode_packet(Packet.pingreq()) + frames
                self._pings += 1
                self._unsettled = 0
            try:
                self._writer.write(frames)
                await self._writer.drain()
                return await asyncio.wait_for(self._waiter, timeout)
            finally:
                self._waiter = None

    async def perform_handshake(self, timeout=30):
        """
        Send the wrapped key and check the ACK: it must decrypt under our own key to
        ``MQTTZ-ACK:<client_id>``.

        :raises HandshakeRejected: broker answered with ERROR
        :raises AckMismatch: ACK does not decrypt or names another client
        """
        wrapped = wrap_client_key(self.config.public_key, self.key)
        reply = await self._request(Packet.handshake_req(wrapped), timeout)
        if reply.kind == PacketKind.ERROR:
            raise HandshakeRejected(reply.error_code)
        if reply.kind != PacketKind.HANDSHAKE_ACK:
            raise HandshakeRejected(0, 'expected HANDSHAKE_ACK, got %s' % reply.kind.name)
        try:
            plaintext = decrypt_payload(self.key, reply.envelope, aead=self.config.aead)
        except BadPadding:
            raise AckMismatch('ACK does not decrypt under our key')
        if plaintext != ack_plaintext(self.client_id):
            raise AckMismatch('ACK is bound to a different client')
        self.handshake_complete = True
        log_event(log, 'handshake_ok', client_id=self.client_id)
        return self

    async def subscribe(self, topic, timeout=30):
        """
        :raises Unauthorized: broker denied the subscription
        """
        reply = await self._request(Packet.subscribe(topic), timeout)
        if reply.kind == PacketKind.ERROR:
            raise _reply_error(reply, 'subscribe to %r' % topic)
        return reply.topic

    async def publish(self, topic, plaintext):
        """
        Encrypt under our key and send. There is no acknowledgement; a refusal shows
        up later in `errors`.

        :return: EncryptedEnvelope that was sent
        """
        env = encrypt_payload(self.key, plaintext, aead=self.config.aead)
        self._unsettled += 1
        await self.send_packet(Packet.publish(topic, env))
        return env

    async def next_message(self, timeout=None):
        """
        Next decrypted `Message`, or None once the connection is closed. Deliveries
        that fail to decrypt are counted in `bad_padding` and skipped.

        :param float/NoneType timeout: seconds to wait for each delivery
        :raises asyncio.TimeoutError: nothing arrived in time
        """
        while True:
            item = await asyncio.wait_for(self._messages.get(), timeout)
            if item is None:
                self._messages.put_nowait(None)
                return None
            pkt, received_ns = item
            try:
                payload = decrypt_payload(self.key, pkt.envelope, aead=self.config.aead)
            except BadPadding:
                self.bad_padding += 1
                log_event(log, 'bad_padding', level=logging.WARNING, client_id=self.client_id, topic=pkt.topic)
                continue
            return Message(pkt.topic, payload, received_ns)

    async def messages(self):
        """Async iterator over `next_message` until the connection closes."""
        while True:
            msg = await self.next_message()
            if msg is None:
                return
            yield msg

    async def subscribe_loop(self, topic, sink, count=None):
        """
        Subscribe, then hand every delivery to ``sink(message)``.

        :param string topic: topic
        :param callable sink: called with each `Message`
        :param int/NoneType count: stop after this many deliveries
        :return: int -- number of deliveries
        """
        await self.subscribe(topic)
        n = 0
        async for msg in self.messages():
            sink(msg)
            n += 1
            if count is not None and n >= count:
                break
        return n

    async def close(self):
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, ssl.SSLError, OSError):
                pass
        if self._reader_task is not None:
            try:
                await asyncio.wait_for(self._reader_task, 5)
            except asyncio.TimeoutError:
                self._reader_task.cancel()

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.close()


async def open_client(config, key=None, handshake=True):
    """Connect and (by default) complete the handshake."""
    client = MqttzClient(config, key=key)
    await client.connect()
    if handshake:
        await client.perform_handshake()
    return client


async def _cmd_handshake(args, config):
    client = await open_client(config)
    await client.close()
    print('handshake ok: %s' % config.client_id)


async def _cmd_pub(args, config):
    if args.payload_file in (None, '-'):
        payload = sys.stdin.buffer.read()
    else:
        with open(args.payload_file, 'rb') as f:
            payload = f.read()
    client = await open_client(config)
    interval = 1.0 / args.rate if args.rate else 0.0
    start = time.monotonic()
    for i in range(args.count):
        if interval:
            delay = start + i * interval - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
        await client.publish(args.topic, payload)
    await asyncio.sleep(0.2)
    await client.close()
    print('published %d x %d bytes to %s' % (args.count, len(payload), args.topic))
    if client.errors:
        print('broker errors: %s' % ', '.join(ERROR_NAMES.get(c, str(c)) for c in client.errors), file=sys.stderr)
        return 1
    return 0


async def _cmd_sub(args, config):
    out = sys.stdout if args.out in (None, '-') else open(args.out, 'w')

    def sink(msg):
        out.write('%.6f\t%s\t%s\n' % (time.time(), msg.topic, base64.b64encode(msg.payload).decode('ascii')))
        out.flush()

    client = await open_client(config)
    try:
        await client.subscribe_loop(args.topic, sink, count=args.count)
    finally:
        await client.close()
        if out is not sys.stdout:
            out.close()
    if client.bad_padding:
        print('undecryptable deliveries: %d' % client.bad_padding, file=sys.stderr)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='mqttz-client', description='mqttz publisher and subscriber.')
    parser.add_argument('--broker', default=DEFAULT_LISTEN, help='host:port')
    parser.add_argument('--id', required=True, dest='client_id', help='client id')
    parser.add_argument('--pubkey', required=True, help='broker public key (PEM)')
    parser.add_argument('--ca', help='TLS trust root; omit only for a vanilla broker without TLS')
    parser.add_argument('--server-hostname', default='localhost')
    parser.add_argument('--key-file', help='32-byte key file (default: fresh random key)')
    parser.add_argument('--aead', action='store_true', help='AES-GCM payload extension')
    parser.add_argument('--log-level', default='WARNING')
    sub = parser.add_subparsers(dest='command')
    sub.required = True
    sub.add_parser('handshake', help='connect and provision the key')
    p = sub.add_parser('pub', help='publish a payload')
    p.add_argument('--topic', required=True)
    p.add_argument('--payload-file', default='-', help="file to send ('-' for stdin)")
    p.add_argument('--rate', type=float, default=0.0, help='messages per second (0: as fast as possible)')
    p.add_argument('--count', type=int, default=1)
    s = sub.add_parser('sub', help='subscribe and print deliveries')
    s.add_argument('--topic', required=True)
    s.add_argument('--count', type=int, default=None, help='exit after this many messages')
    s.add_argument('--out', default='-', help="output file ('-' for stdout)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(getattr(logging, args.log_level.upper(), logging.WARNING))
    commands = {'handshake': _cmd_handshake, 'pub': _cmd_pub, 'sub': _cmd_sub}
    try:
        config = ClientConfig(args.client_id, broker=args.broker, pubkey_path=args.pubkey,
                              key_source='file' if args.key_file else 'random', key_file=args.key_file,
                              ca_file=args.ca, server_hostname=args.server_hostname, aead=args.aead)
        return asyncio.run(commands[args.command](args, config)) or 0
    except (MqttzError, ValueError, OSError, ssl.SSLError) as e:
        print('mqttz-client: %s' % e, file=sys.stderr)
        return 1


if __name__ == '__main__':
    raise SystemExit(main())
