#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
The untrusted broker engine. It terminates TLS, enforces the ACL, keeps the
subscription table and fans each publish out through the trusted gateway, one
re-encryption per subscriber. Payloads only ever pass through here as envelopes.

Modes:

* ``tee``: re-encryption in the trusted core, serialized through one worker thread.
* ``ree``: same re-encryption, run inline on the broker's event loop.
* ``vanilla``: envelopes are forwarded unchanged (baseline, TLS optional).

In every mode the handshake provisions the client key through the trusted core.
"""

import argparse
import asyncio
import csv
import logging
import multiprocessing
import signal
import ssl
import sys
import threading
import time
from collections import Counter, OrderedDict

from mqttz.MqttzAcl import AclTable, READ, WRITE, load_acl
from mqttz.MqttzConfig import BrokerConfig, DEFAULT_CAPACITY, DEFAULT_LISTEN
from mqttz.MqttzErrors import (AclParseError, BadPadding, MalformedPacket, MqttzError, NoKey,
                               ERROR_INTERNAL, ERROR_MALFORMED, ERROR_NO_KEY, ERROR_UNAUTHORIZED, wire_code)
from mqttz.MqttzLog import configure_logging, get_logger, log_event
from mqttz.MqttzProtocol import Packet, PacketKind, TopicName, encode_packet, decode_packet, read_frame
from mqttz.MqttzTls import server_ssl_context
from mqttz.MqttzTrustedCore import TrustedContext, TrustedGateway

log = get_logger('broker')


class Session(object):
    """
    One connected client.

    :var string client_id: id from CONNECT
    :var set subscriptions: topics this session is subscribed to
    :var bool handshake_complete: True once the trusted core provisioned its key
    """

    def __init__(self, client_id, writer, tap=None):
        self.client_id = client_id
        self.writer = writer
        self.subscriptions = set()
        self.handshake_complete = False
        self._tap = tap
        self._lock = asyncio.Lock()
        peer = writer.get_extra_info('peername')
        self.peer = '%s:%s' % peer[:2] if peer else '?'

    async def send(self, packet):
        frame = encode_packet(packet)
        if self._tap is not None:
            self._tap(frame)
        async with self._lock:
            self.writer.write(frame)
            await self.writer.drain()

    def __repr__(self):
        return 'Session(%s, handshake=%s, subs=%d)' % (self.client_id, self.handshake_complete,
                                                       len(self.subscriptions))


class SubscriptionTable(object):
    """
    topic -> subscribers in subscription order. Lives in the untrusted world.
    """

    def __init__(self):
        self._topics = {}

    def __len__(self):
        return sum(len(v) for v in self._topics.values())

    def add(self, topic, client_id):
        """:return: bool -- False if the client was already subscribed"""
        subs = self._topics.setdefault(topic, OrderedDict())
        if client_id in subs:
            return False
        subs[client_id] = None
        return True

    def subscribers(self, topic):
        return list(self._topics.get(topic, ()))

    def topics(self):
        return sorted(self._topics)

    def remove(self, topic, client_id):
        subs = self._topics.get(topic)
        if subs is None or client_id not in subs:
            return False
        del subs[client_id]
        if not subs:
            del self._topics[topic]
        return True

    def remove_client(self, client_id):
        for topic in [t for t, subs in self._topics.items() if client_id in subs]:
            self.remove(topic, client_id)

    def prune(self, keep):
        """
        Drop every (topic, client) pair for which ``keep(topic, client_id)`` is false.

        :return: list of removed (topic, client_id) pairs
        """
        removed = [(t, c) for t, subs in self._topics.items() for c in subs if not keep(t, c)]
        for t, c in removed:
            self.remove(t, c)
        return removed


class Broker(object):
    """
    Broker core. Build it inside a running event loop and call `start`.

    :var mqttz.BrokerConfig config: settings
    :var mqttz.AclTable acl: current ACL
    :var mqttz.TrustedGateway gateway: only way into the trusted core
    :var dict sessions: client id -> Session
    :var mqttz.SubscriptionTable subscriptions: topic table
    :var collections.Counter counters: published, delivered, denied, no_key_skips, malformed
    :var callable/NoneType dispatch_tap: receives every inbound and outbound frame
    """

    def __init__(self, config, acl=None, dispatch_tap=None):
        """
        :param mqttz.BrokerConfig config: validated settings
        :param mqttz.AclTable/NoneType acl: table to use instead of loading `config.acl`
        :param callable/NoneType dispatch_tap: instrumentation hook, called with raw frames
        :raises AclParseError: bad ACL file
        :raises MissingSeed/UnsealFailed: trusted core cannot open its store
        """
        self.config = config
        if acl is not None:
            self.acl = acl
        elif config.acl is not None:
            self.acl = load_acl(config.acl)
        else:
            self.acl = AclTable()
        ctx = TrustedContext.open(config.store_dir, config.huk_seed, config.cache_capacity, aead=config.aead)
        self.gateway = TrustedGateway(ctx, serialized=(config.mode != 'ree'),
                                      world_switch_us=config.world_switch_us)
        self.sessions = {}
        self.subscriptions = SubscriptionTable()
        self.counters = Counter()
        self.dispatch_tap = dispatch_tap
        self._writers = set()
        self._server = None
        self._cpu_task = None
        self.port = None

    @property
    def mode(self):
        return self.config.mode

    async def start(self):
        ssl_ctx = server_ssl_context(self.config.cert, self.config.key) if self.config.tls else None
        self._server = await asyncio.start_server(self._serve, self.config.host, self.config.port, ssl=ssl_ctx)
        self.port = self._server.sockets[0].getsockname()[1]
        if self.config.export_pubkey:
            self.gateway.export_public_key(self.config.export_pubkey)
        if self.config.cpu_log:
            self._cpu_task = asyncio.ensure_future(self._log_cpu(self.config.cpu_log))
        log_event(log, 'broker_started', host=self.config.host, port=self.port, mode=self.mode,
                  tls=self.config.tls, acl_clients=len(self.acl))

    async def stop(self):
        """Close every session, write the key cache back to the store and shut the gateway."""
        if self._server is not None:
            self._server.close()
        for writer in list(self._writers):
            writer.close()
        if self._server is not None:
            await self._server.wait_closed()
            self._server = None
        if self._cpu_task is not None:
            self._cpu_task.cancel()
            try:
                await self._cpu_task
            except asyncio.CancelledError:
                pass
        self.gateway.flush()
        self.gateway.close()
        log_event(log, 'broker_stopped', **dict(self.counters))

    def _tap(self, frame):
        if self.dispatch_tap is not None:
            self.dispatch_tap(frame)

    async def _send_raw(self, writer, packet):
        frame = encode_packet(packet)
        self._tap(frame)
        writer.write(frame)
        await writer.drain()

    async def _serve(self, reader, writer):
        self._writers.add(writer)
        session = None
        try:
            pkt = await self._next_packet(reader)
            if pkt is None:
                return
            if pkt.kind != PacketKind.CONNECT:
                log_event(log, 'auth_denied', reason='expected CONNECT', kind=pkt.kind.name)
                await self._send_raw(writer, Packet.error(ERROR_UNAUTHORIZED))
                return
            if pkt.client_id in self.sessions:
                log_event(log, 'auth_denied', reason='duplicate client id', client_id=pkt.client_id)
                await self._send_raw(writer, Packet.error(ERROR_UNAUTHORIZED))
                return
            session = Session(pkt.client_id, writer, tap=self._tap)
            self.sessions[session.client_id] = session
            log_event(log, 'connect', client_id=session.client_id, peer=session.peer)
            await session.send(Packet.connack())
            while True:
                pkt = await self._next_packet(reader)
                if pkt is None:
                    break
                reply = await self.handle_packet(session, pkt)
                if reply is not None:
                    await session.send(reply)
        except MalformedPacket as e:
            self.counters['malformed'] += 1
            log_event(log, 'malformed_frame', level=logging.WARNING,
                      client_id=getattr(session, 'client_id', None), error=str(e))
            await self._try_send(writer, Packet.error(ERROR_MALFORMED))
        except (ConnectionError, ssl.SSLError, asyncio.IncompleteReadError):
            pass
        except Exception as e:
            log.exception('session failed')
            await self._try_send(writer, Packet.error(wire_code(e)))
        finally:
            if session is not None and self.sessions.get(session.client_id) is session:
                del self.sessions[session.client_id]
                self.subscriptions.remove_client(session.client_id)
                log_event(log, 'disconnect', client_id=session.client_id)
            self._writers.discard(writer)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, ssl.SSLError, OSError):
                pass

    async def _next_packet(self, reader):
        frame = await read_frame(reader)
        if frame is None:
            return None
        self._tap(frame)
        return decode_packet(frame)

    async def _try_send(self, writer, packet):
        try:
            await self._send_raw(writer, packet)
        except (ConnectionError, ssl.SSLError, OSError):
            pass

    async def handle_packet(self, session, pkt):
        """
        Route one packet of an established session.

        :return: reply Packet or None
        """
        if pkt.kind == PacketKind.HANDSHAKE_REQ:
            return await self.handle_handshake(session, pkt)
        if pkt.kind == PacketKind.PUBLISH:
            return await self.handle_publish(session, pkt)
        if pkt.kind == PacketKind.SUBSCRIBE:
            return await self.handle_subscribe(session, pkt)
        if pkt.kind == PacketKind.PINGREQ:
            return Packet.pingresp()
        if pkt.kind == PacketKind.CONNECT:
            log_event(log, 'auth_denied', client_id=session.client_id, reason='second CONNECT')
            return Packet.error(ERROR_UNAUTHORIZED)
        self.counters['malformed'] += 1
        log_event(log, 'malformed_frame', level=logging.WARNING, client_id=session.client_id,
                  error='unexpected %s from client' % pkt.kind.name)
        return Packet.error(ERROR_MALFORMED)

    async def handle_handshake(self, session, pkt):
        """
        Hand the wrapped key to the trusted core and relay its encrypted ACK. The broker
        never sees the unwrapped key. A failed handshake leaves the session state as it was.

        :return: HANDSHAKE_ACK or ERROR packet
        """
        if not self.acl.has_client(session.client_id):
            log_event(log, 'handshake_failed', client_id=session.client_id, reason='no ACL entries')
            return Packet.error(ERROR_UNAUTHORIZED)
        try:
            ack = await self.gateway.provision(session.client_id, pkt.wrapped_key)
        except Exception as e:
            log_event(log, 'handshake_failed', level=logging.WARNING, client_id=session.client_id,
                      reason=getattr(e, 'code', type(e).__name__))
            return Packet.error(ERROR_INTERNAL)
        session.handshake_complete = True
        log_event(log, 'handshake_ok', client_id=session.client_id)
        return Packet.handshake_ack(ack)

    async def handle_subscribe(self, session, pkt):
        """:return: SUBACK or ERROR packet"""
        topic = TopicName(pkt.topic)
        if not session.handshake_complete:
            return self._deny(session, topic, 'subscribe before handshake')
        if topic.reserved:
            return self._deny(session, topic, 'reserved topic')
        if not self.acl.authorize(session.client_id, topic, READ):
            return self._deny(session, topic, 'read not granted')
        self.subscriptions.add(topic, session.client_id)
        session.subscriptions.add(topic)
        return Packet.suback(topic)

    async def handle_publish(self, session, pkt):
        """
        Fan one publish out to the topic's current subscribers, in subscription order,
        each with its own re-encrypted envelope. Subscribers without a key are skipped.

        :return: None, or an ERROR packet for the publisher
        """
        topic = pkt.topic
        if not session.handshake_complete:
            return self._deny(session, topic, 'publish before handshake')
        if not self.acl.authorize(session.client_id, topic, WRITE):
            return self._deny(session, topic, 'write not granted')
        self.counters['published'] += 1
        skipped = 0
        for sub_id in self.subscriptions.subscribers(topic):
            sub = self.sessions.get(sub_id)
            if sub is None:
                continue
            env = pkt.envelope
            if self.mode != 'vanilla':
                try:
                    env, _ = await self.gateway.reencrypt(session.client_id, sub_id, pkt.envelope)
                except NoKey as e:
                    if e.client_id == session.client_id:
                        log_event(log, 'no_key_skip', level=logging.WARNING, client_id=session.client_id,
                                  topic=topic, role='publisher')
                        return Packet.error(ERROR_NO_KEY)
                    self.counters['no_key_skips'] += 1
                    skipped += 1
                    log_event(log, 'no_key_skip', level=logging.WARNING, client_id=sub_id, topic=topic,
                              origin=session.client_id)
                    continue
                except BadPadding:
                    log_event(log, 'malformed_frame', level=logging.WARNING, client_id=session.client_id,
                              error='envelope does not decrypt under the publisher key')
                    return Packet.error(ERROR_MALFORMED)
            try:
                await sub.send(Packet.message(topic, env))
            except (ConnectionError, ssl.SSLError):
                continue
            self.counters['delivered'] += 1
        if skipped:
            return Packet.error(ERROR_NO_KEY)
        return None

    def _deny(self, session, topic, reason):
        self.counters['denied'] += 1
        log_event(log, 'auth_denied', client_id=session.client_id, topic=topic, reason=reason)
        return Packet.error(ERROR_UNAUTHORIZED)

    def set_acl(self, acl):
        """
        Swap in a new ACL and drop subscriptions it no longer grants.

        :return: list of pruned (topic, client_id) pairs
        """
        self.acl = acl
        pruned = self.subscriptions.prune(lambda t, c: acl.authorize(c, t, READ))
        for topic, client_id in pruned:
            sub = self.sessions.get(client_id)
            if sub is not None:
                sub.subscriptions.discard(topic)
        log_event(log, 'acl_reloaded', clients=len(acl), pruned=len(pruned))
        return pruned

    def reload_acl(self):
        """
        Re-read the ACL file (SIGHUP). A file that fails to parse keeps the old table.

        :return: bool -- True if a new table is in effect
        """
        if self.config.acl is None:
            return False
        try:
            acl = load_acl(self.config.acl)
        except (AclParseError, OSError) as e:
            log_event(log, 'acl_reload_failed', level=logging.ERROR, path=self.config.acl, error=str(e))
            return False
        self.set_acl(acl)
        return True

    def stats(self):
        out = dict(self.counters)
        out['sessions'] = len(self.sessions)
        out['subscriptions'] = len(self.subscriptions)
        out['reencrypt_calls'] = self.gateway.reencrypt_calls
        out['cache'] = self.gateway.stats()
        return out

    async def _log_cpu(self, path, interval=1.0):
        with open(path, 'w', newline='') as f:
            out = csv.writer(f)
            out.writerow(['second', 'cpu_percent', 'monotonic'])
            f.flush()
            second = 0
            wall, cpu = time.monotonic(), time.process_time()
            while True:
                await asyncio.sleep(interval)
                now_wall, now_cpu = time.monotonic(), time.process_time()
                # monotonic is the system-wide clock at the start of the sampled interval
                out.writerow([second, round(100.0 * (now_cpu - cpu) / (now_wall - wall), 3), round(wall, 6)])
                f.flush()
                second += 1
                wall, cpu = now_wall, now_cpu


async def serve(config, acl=None, on_ready=None):
    """
    Run a broker until SIGTERM/SIGINT; SIGHUP reloads the ACL.

    :param mqttz.BrokerConfig config: settings
    :param mqttz.AclTable/NoneType acl: optional preloaded ACL
    :param callable/NoneType on_ready: called with the bound port once listening
    """
    broker = Broker(config, acl=acl)
    await broker.start()
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError, ValueError):
            pass
    if hasattr(signal, 'SIGHUP'):
        try:
            loop.add_signal_handler(signal.SIGHUP, broker.reload_acl)
        except (NotImplementedError, RuntimeError, ValueError):
            pass
    if on_ready is not None:
        on_ready(broker.port)
    try:
        await stop.wait()
    finally:
        await broker.stop()


def run_broker(config):
    """Blocking entry point; serves until a shutdown signal arrives."""
    asyncio.run(serve(config))


class BrokerThread(object):
    """
    In-process broker on its own event loop thread, for tests and the latency benches.

    Usage::

        with BrokerThread(config, acl=acl) as bt:
            ... connect to 127.0.0.1:bt.port ...
    """

    def __init__(self, config, acl=None, dispatch_tap=None):
        self.config = config
        self._acl = acl
        self._tap = dispatch_tap
        self.broker = None
        self.loop = None
        self._stop = None
        self._ready = threading.Event()
        self._error = None
        self._thread = threading.Thread(target=self._main, name='mqttz-broker', daemon=True)

    def _main(self):
        self.loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self.loop)
        try:
            self.loop.run_until_complete(self._run())
        finally:
            self.loop.close()

    async def _run(self):
        self._stop = asyncio.Event()
        try:
            self.broker = Broker(self.config, acl=self._acl, dispatch_tap=self._tap)
            await self.broker.start()
        except BaseException as e:
            self._error = e
            self._ready.set()
            return
        self._ready.set()
        await self._stop.wait()
        await self.broker.stop()

    def start(self, timeout=60):
        self._thread.start()
        if not self._ready.wait(timeout):
            raise RuntimeError('broker thread did not start within %s s' % timeout)
        if self._error is not None:
            raise self._error
        return self

    def call(self, fn, *args, timeout=30):
        """Run ``fn(*args)`` on the broker loop thread and return its result."""
        async def _call():
            return fn(*args)
        return asyncio.run_coroutine_threadsafe(_call(), self.loop).result(timeout)

    def stop(self, timeout=60):
        if self.loop is not None and self._stop is not None and self._thread.is_alive():
            self.loop.call_soon_threadsafe(self._stop.set)
        self._thread.join(timeout)

    @property
    def port(self):
        return self.broker.port

    @property
    def public_key(self):
        return self.broker.gateway.public_key

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def _process_main(config, conn, log_level):
    configure_logging(log_level)

    def ready(port):
        conn.send(('ready', port))

    try:
        asyncio.run(serve(config, on_ready=ready))
    except (MqttzError, ValueError, OSError, ssl.SSLError) as e:
        conn.send(('error', '%s: %s' % (type(e).__name__, e)))


class BrokerProcess(object):
    """
    Broker in a separate (spawned) process, so its CPU time can be measured on its own
    and it can be stopped with SIGTERM or killed outright.
    """

    def __init__(self, config, log_level=logging.WARNING):
        self.config = config
        self.log_level = log_level
        self.port = None
        self._ctx = multiprocessing.get_context('spawn')
        self._conn, child = self._ctx.Pipe(duplex=False)
        self._process = self._ctx.Process(target=_process_main, args=(config, child, log_level),
                                          name='mqttz-broker', daemon=True)

    def start(self, timeout=60):
        self._process.start()
        if not self._conn.poll(timeout):
            self._process.kill()
            raise RuntimeError('broker process did not start within %s s' % timeout)
        status, value = self._conn.recv()
        if status != 'ready':
            self._process.join(5)
            raise RuntimeError('broker process failed to start: %s' % value)
        self.port = value
        return self

    @property
    def pid(self):
        return self._process.pid

    def stop(self, timeout=30):
        """SIGTERM: sessions closed, key cache flushed to the store."""
        if self._process.is_alive():
            self._process.terminate()
        self._process.join(timeout)
        if self._process.is_alive():
            self._process.kill()
            self._process.join()
        return self._process.exitcode

    def kill(self):
        """SIGKILL: no shutdown path runs."""
        self._process.kill()
        self._process.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def build_parser():
    parser = argparse.ArgumentParser(prog='mqttz-broker', description='Pub/sub broker that re-encrypts payloads in a trusted core.')
    parser.add_argument('--listen', default=DEFAULT_LISTEN, help='host:port (default %(default)s)')
    parser.add_argument('--cert', help='TLS certificate (PEM)')
    parser.add_argument('--key', help='TLS private key (PEM)')
    parser.add_argument('--acl', help='ACL file')
    parser.add_argument('--store-dir', default='mqttz-store', help='secure store directory')
    parser.add_argument('--cache-capacity', type=int, default=DEFAULT_CAPACITY, help='LRU key cache entries')
    parser.add_argument('--export-pubkey', help='write the broker public key (PEM) here')
    parser.add_argument('--mode', choices=('vanilla', 'ree', 'tee'), default='tee')
    parser.add_argument('--aead', action='store_true', help='AES-GCM payload extension')
    parser.add_argument('--world-switch-us', type=float, default=0.0,
                        help='simulated cost of each trusted call in tee mode')
    parser.add_argument('--cpu-log', help='CSV of per-second broker CPU utilization')
    parser.add_argument('--log-level', default='INFO')
    parser.add_argument('--log-file', help='event log file (default stderr)')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(getattr(logging, args.log_level.upper(), logging.INFO), path=args.log_file)
    try:
        config = BrokerConfig(listen=args.listen, cert=args.cert, key=args.key, acl=args.acl,
                              store_dir=args.store_dir, cache_capacity=args.cache_capacity,
                              export_pubkey=args.export_pubkey, mode=args.mode, aead=args.aead,
                              world_switch_us=args.world_switch_us, cpu_log=args.cpu_log)
        run_broker(config)
    except (MqttzError, ValueError, OSError, ssl.SSLError) as e:
        print('mqttz-broker: %s' % e, file=sys.stderr)
        return 2
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
