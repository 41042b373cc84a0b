import asyncio
import os
import struct
import tempfile
import time
import unittest

import numpy as np

from util import BrokerFixture, run, timeit, wait_until
from mqttz.MqttzAcl import parse_acl
from mqttz.MqttzBroker import BrokerProcess, BrokerThread, SubscriptionTable
from mqttz.MqttzClient import MqttzClient, open_client
from mqttz.MqttzConfig import BrokerConfig, write_key_file
from mqttz.MqttzCrypto import generate_broker_keypair, generate_client_key, load_public_key, public_key_pem
from mqttz.MqttzErrors import (HandshakeRejected, MqttzError, UnsealFailed, Unauthorized,
                               ERROR_INTERNAL, ERROR_MALFORMED, ERROR_NO_KEY, ERROR_UNAUTHORIZED)
from mqttz.MqttzLog import capture_events
from mqttz.MqttzProtocol import HEADER, Packet, PacketKind, encode_packet, read_packet
from mqttz.MqttzTls import client_ssl_context, make_dev_ca
from mqttz.MqttzTrustedCore import TrustedContext

WARD_ACL = """
user alice
topic write ward/a
topic read ward/#
user bob
topic read ward/#
user carol
topic read ward/#
user dave
topic write ward/b
"""


class MqttzBrokerTestCase(unittest.TestCase):

    def test_end_to_end_tls(self):
        frames = []
        with BrokerFixture(WARD_ACL, dispatch_tap=frames.append) as tb:
            marker = os.urandom(128).hex().encode()
            self.assertEqual(len(marker), 256)

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                alice = await open_client(tb.client_config('alice'))
                self.assertEqual(await bob.subscribe('ward/a'), 'ward/a')
                await alice.publish('ward/a', marker)
                msg = await bob.next_message(timeout=10)
                await alice.close()
                await bob.close()
                return msg, alice.key, bob.key

            msg, alice_key, bob_key = run(scenario())
            broker = tb.broker
            self.assertEqual(msg.topic, 'ward/a')
            self.assertEqual(msg.payload, marker)
            self.assertGreater(msg.received_ns, 0)

        self.assertEqual(broker.counters['delivered'], 1)
        # the broker never held the plaintext or a raw client key
        self.assertTrue(any(f[0] == PacketKind.MESSAGE for f in frames))
        for f in frames:
            self.assertNotIn(marker, f)
            self.assertNotIn(alice_key, f)
            self.assertNotIn(bob_key, f)

    def test_wrong_public_key(self):
        with BrokerFixture(WARD_ACL) as tb:
            stranger = generate_broker_keypair().public_key()

            async def scenario():
                alice = MqttzClient(tb.client_config('alice', public_key=stranger))
                await alice.connect()
                with self.assertRaises(HandshakeRejected) as cm:
                    await alice.perform_handshake()
                self.assertEqual(cm.exception.error_code, ERROR_INTERNAL)
                # the session is still open but not authorized to publish
                await alice.publish('ward/a', b'x')
                self.assertTrue(await wait_until(lambda: alice.errors))
                await alice.close()
                return alice.errors

            self.assertEqual(run(scenario()), [ERROR_UNAUTHORIZED])

    def test_failed_rehandshake_keeps_session(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                await bob.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'))
                good = alice.config.public_key
                alice.config.public_key = generate_broker_keypair().public_key()
                with self.assertRaises(HandshakeRejected):
                    await alice.perform_handshake()
                alice.config.public_key = good
                await alice.publish('ward/a', b'still provisioned')
                msg = await bob.next_message(timeout=10)
                await alice.close()
                await bob.close()
                return msg

            self.assertEqual(run(scenario()).payload, b'still provisioned')

    def test_empty_acl_denies_everything(self):
        with BrokerFixture('') as tb:

            async def scenario():
                alice = MqttzClient(tb.client_config('alice'))
                await alice.connect()
                with self.assertRaises(HandshakeRejected) as cm:
                    await alice.perform_handshake()
                with self.assertRaises(Unauthorized):
                    await alice.subscribe('ward/a')
                await alice.close()
                return cm.exception.error_code

            self.assertEqual(run(scenario()), ERROR_UNAUTHORIZED)
            self.assertEqual(len(tb.broker.acl), 0)

    def test_default_deny(self):
        with BrokerFixture(WARD_ACL + 'user ops\ntopic readwrite #\n') as tb:

            async def scenario():
                alice = await open_client(tb.client_config('alice'))
                dave = await open_client(tb.client_config('dave'))
                ops = await open_client(tb.client_config('ops'))
                with self.assertRaises(Unauthorized):
                    await dave.subscribe('ward/a')
                with self.assertRaises(Unauthorized):
                    await alice.subscribe('clinic/x')
                # reserved even when the ACL grants everything
                with self.assertRaises(Unauthorized):
                    await ops.subscribe('mqttz/handshake')
                await alice.publish('ward/b', b'not mine')
                self.assertTrue(await wait_until(lambda: alice.errors))
                for c in (alice, dave, ops):
                    await c.close()
                return alice.errors

            self.assertEqual(run(scenario()), [ERROR_UNAUTHORIZED])
            self.assertEqual(tb.broker.counters['denied'], 4)

    def test_denied_publish_then_request(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def scenario():
                alice = await open_client(tb.client_config('alice'))
                bob = await open_client(tb.client_config('bob'))
                # refused publish immediately followed by a request that succeeds
                await alice.publish('ward/b', b'not mine')
                self.assertEqual(await alice.subscribe('ward/c'), 'ward/c')
                alice_errors = list(alice.errors)
                # refused publish followed by a request that is refused as well
                await bob.publish('ward/a', b'read only')
                with self.assertRaises(Unauthorized):
                    await bob.subscribe('clinic/x')
                bob_errors = list(bob.errors)
                # a successful publish leaves nothing behind
                await alice.publish('ward/a', b'ok')
                self.assertEqual(await alice.subscribe('ward/d'), 'ward/d')
                subscribed = tb.broker.subscriptions.subscribers('ward/c')
                await alice.close()
                await bob.close()
                return alice_errors, bob_errors, alice.errors, subscribed

            alice_errors, bob_errors, alice_after, subscribed = run(scenario())
            self.assertEqual(alice_errors, [ERROR_UNAUTHORIZED])
            self.assertEqual(bob_errors, [ERROR_UNAUTHORIZED])
            self.assertEqual(alice_after, [ERROR_UNAUTHORIZED])
            self.assertEqual(list(subscribed), ['alice'])
            self.assertEqual(tb.broker.counters['published'], 0)

    def test_subscribe_before_handshake(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def scenario():
                bob = await open_client(tb.client_config('bob'), handshake=False)
                with self.assertRaises(Unauthorized):
                    await bob.subscribe('ward/a')
                await bob.perform_handshake()
                await bob.subscribe('ward/a')
                await bob.close()

            run(scenario())

    def test_revocation(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def subscribe_both():
                bob = await open_client(tb.client_config('bob'))
                carol = await open_client(tb.client_config('carol'))
                await bob.subscribe('ward/a')
                await carol.subscribe('ward/a')
                return bob, carol

            async def scenario():
                bob, carol = await subscribe_both()
                alice = await open_client(tb.client_config('alice'))
                revoked = parse_acl(WARD_ACL.replace('user bob\ntopic read ward/#\n', 'user bob\n'))
                pruned = tb.thread.call(tb.broker.set_acl, revoked)
                self.assertEqual(pruned, [('ward/a', 'bob')])
                await alice.publish('ward/a', b'after revocation')
                self.assertEqual((await carol.next_message(timeout=10)).payload, b'after revocation')
                with self.assertRaises(asyncio.TimeoutError):
                    await bob.next_message(timeout=0.5)
                with self.assertRaises(Unauthorized):
                    await bob.subscribe('ward/a')

                # SIGHUP path: re-read the file; a broken file keeps the current table
                tb.write_acl('user alice\ntopic read ward/+\n')
                self.assertFalse(tb.thread.call(tb.broker.reload_acl))
                self.assertIs(tb.broker.acl, revoked)
                tb.write_acl(WARD_ACL.replace('user carol\ntopic read ward/#\n', ''))
                self.assertTrue(tb.thread.call(tb.broker.reload_acl))
                self.assertEqual(tb.broker.subscriptions.subscribers('ward/a'), [])
                for c in (alice, bob, carol):
                    await c.close()

            run(scenario())

    def test_one_reencryption_per_subscriber(self):
        ids = ['sub%d' % i for i in range(3)]
        acl = WARD_ACL + ''.join('user %s\ntopic read ward/a\n' % i for i in ids)
        with BrokerFixture(acl) as tb:

            async def scenario():
                subs = [await open_client(tb.client_config(i)) for i in ids]
                for s in subs:
                    await s.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'))
                before = tb.broker.gateway.reencrypt_calls
                await alice.publish('ward/a', b'fan out')
                got = [await s.next_message(timeout=10) for s in subs]
                after = tb.broker.gateway.reencrypt_calls
                for c in subs + [alice]:
                    await c.close()
                return got, after - before

            got, calls = run(scenario())
            self.assertEqual([m.payload for m in got], [b'fan out'] * 3)
            self.assertEqual(calls, 3)

    def test_disconnect_cleanup(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                await bob.subscribe('ward/a')
                self.assertEqual(tb.broker.subscriptions.subscribers('ward/a'), ['bob'])
                await bob.close()
                self.assertTrue(await wait_until(lambda: 'bob' not in tb.broker.sessions))
                # same id may connect again once the old session is gone
                bob = await open_client(tb.client_config('bob'))
                await bob.close()

            run(scenario())
            self.assertEqual(tb.broker.subscriptions.subscribers('ward/a'), [])

    def test_duplicate_client_id(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def scenario():
                first = await open_client(tb.client_config('bob'))
                second = MqttzClient(tb.client_config('bob'))
                with self.assertRaises(HandshakeRejected) as cm:
                    await second.connect()
                await first.close()
                return cm.exception.error_code

            self.assertEqual(run(scenario()), ERROR_UNAUTHORIZED)

    def test_missing_subscriber_key(self):
        with BrokerFixture(WARD_ACL) as tb:

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                carol = await open_client(tb.client_config('carol'))
                await bob.subscribe('ward/a')
                await carol.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'))
                tb.broker.gateway.flush()
                tb.broker.gateway._ctx.store.remove('bob')
                cap = capture_events()
                try:
                    await alice.publish('ward/a', b'reading')
                    msg = await carol.next_message(timeout=10)
                    self.assertTrue(await wait_until(lambda: alice.errors))
                finally:
                    cap.detach()
                with self.assertRaises(asyncio.TimeoutError):
                    await bob.next_message(timeout=0.3)
                for c in (alice, bob, carol):
                    await c.close()
                return msg, alice.errors, cap.events('no_key_skip')

            msg, errors, skips = run(scenario())
            self.assertEqual(msg.payload, b'reading')
            self.assertEqual(errors, [ERROR_NO_KEY])
            self.assertEqual([s[1]['client_id'] for s in skips], ['bob'])
            self.assertEqual(tb.broker.counters['no_key_skips'], 1)

    def test_malformed_frames(self):
        with BrokerFixture(WARD_ACL) as tb:
            ssl_ctx = client_ssl_context(tb.certs['ca_cert'])

            async def raw_session(first_frames):
                reader, writer = await asyncio.open_connection('127.0.0.1', tb.port, ssl=ssl_ctx,
                                                               server_hostname='localhost')
                replies = []
                for frame in first_frames:
                    writer.write(frame)
                    await writer.drain()
                    replies.append(await read_packet(reader))
                writer.close()
                return replies

            async def scenario():
                connect = encode_packet(Packet.connect('bob'))
                # garbage kind after CONNECT: ERROR(MALFORMED) then the broker hangs up
                r = await raw_session([connect, bytes([0xFF, 0, 0, 0, 0]), b''])
                self.assertEqual(r[0].kind, PacketKind.CONNACK)
                self.assertEqual(r[1].error_code, ERROR_MALFORMED)
                self.assertIsNone(r[2])
                await wait_until(lambda: 'bob' not in tb.broker.sessions)
                # a well-formed but unexpected kind is refused without dropping the session
                suback = encode_packet(Packet.suback('ward/a'))
                r = await raw_session([connect, suback, encode_packet(Packet.subscribe('ward/a'))])
                self.assertEqual(r[1].error_code, ERROR_MALFORMED)
                self.assertEqual(r[2].error_code, ERROR_UNAUTHORIZED)
                await wait_until(lambda: 'bob' not in tb.broker.sessions)
                # first packet must be CONNECT
                r = await raw_session([encode_packet(Packet.subscribe('ward/a')), b''])
                self.assertEqual(r[0].error_code, ERROR_UNAUTHORIZED)
                self.assertIsNone(r[1])
                # oversized declared length
                r = await raw_session([connect, HEADER.pack(PacketKind.PUBLISH, (1 << 20) + 1)])
                self.assertEqual(r[1].error_code, ERROR_MALFORMED)

            run(scenario())
            self.assertGreaterEqual(tb.broker.counters['malformed'], 3)

    def test_tls_required(self):
        with BrokerFixture(WARD_ACL) as tb:
            with tempfile.TemporaryDirectory() as tmp:
                other_ca = make_dev_ca(tmp)['ca_cert']

                async def scenario():
                    plain = MqttzClient(tb.client_config('bob', ca_file=None))
                    with self.assertRaises((MqttzError, OSError)):
                        await plain.connect()
                    await plain.close()
                    untrusted = MqttzClient(tb.client_config('bob', ca_file=other_ca))
                    with self.assertRaises(OSError):
                        await untrusted.connect()

                run(scenario())

    def test_vanilla_forwards_unchanged(self):
        with BrokerFixture(WARD_ACL, mode='vanilla', tls=False) as tb:
            shared = generate_client_key()

            async def scenario():
                bob = await open_client(tb.client_config('bob'), key=shared)
                carol = await open_client(tb.client_config('carol'))
                await bob.subscribe('ward/a')
                await carol.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'), key=shared)
                for i in range(20):
                    await alice.publish('ward/a', struct.pack('>I', i))
                got = [await bob.next_message(timeout=10) for _ in range(20)]
                # carol holds another key: the forwarded envelopes are noise to her
                delivered = []
                while True:
                    try:
                        delivered.append(await carol.next_message(timeout=0.5))
                    except asyncio.TimeoutError:
                        break
                for c in (alice, bob, carol):
                    await c.close()
                return got, carol.bad_padding, len(delivered)

            got, bad, leaked = run(scenario())
            self.assertEqual([struct.unpack('>I', m.payload)[0] for m in got], list(range(20)))
            self.assertEqual(bad + leaked, 20)
            self.assertGreaterEqual(bad, 15)
            self.assertEqual(tb.broker.gateway.reencrypt_calls, 0)
            self.assertEqual(tb.broker.gateway.calls['provision'], 3)

    def test_ree_mode(self):
        with BrokerFixture(WARD_ACL, mode='ree') as tb:

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                await bob.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'))
                await alice.publish('ward/a', b'inline')
                msg = await bob.next_message(timeout=10)
                await alice.close()
                await bob.close()
                return msg

            self.assertEqual(run(scenario()).payload, b'inline')
            stats = tb.broker.stats()
            self.assertFalse(tb.broker.gateway.serialized)
            self.assertEqual(stats['reencrypt_calls'], 1)
            self.assertEqual(stats['cache']['size'], 2)

    def test_aead_mode(self):
        with BrokerFixture(WARD_ACL, aead=True) as tb:

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                await bob.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'))
                await alice.publish('ward/a', b'authenticated')
                msg = await bob.next_message(timeout=10)
                await alice.close()
                await bob.close()
                return msg

            self.assertEqual(run(scenario()).payload, b'authenticated')

    @timeit
    def test_ordering(self):
        with BrokerFixture(WARD_ACL) as tb:
            rng = np.random.default_rng(42)
            payloads = [rng.bytes(n) for n in rng.integers(0, 20481, size=1000)]

            async def scenario():
                bob = await open_client(tb.client_config('bob'))
                await bob.subscribe('ward/a')
                alice = await open_client(tb.client_config('alice'))
                for p in payloads:
                    await alice.publish('ward/a', p)
                got = [await bob.next_message(timeout=30) for _ in payloads]
                await alice.close()
                await bob.close()
                return [m.payload for m in got], alice.errors, bob.bad_padding

            got, errors, bad = run(scenario())
            self.assertEqual((errors, bad), ([], 0))
            self.assertEqual(len(got), 1000)
            first_mismatch = next((i for i, (a, b) in enumerate(zip(got, payloads)) if a != b), None)
            self.assertIsNone(first_mismatch)
            broker = tb.broker
        self.assertEqual(broker.counters['delivered'], 1000)
        self.assertEqual(broker.counters['published'], 1000)

    def test_restart_keeps_keypair(self):
        tb = BrokerFixture(WARD_ACL).start()
        try:
            pem = public_key_pem(load_public_key(tb.pubkey_path))
            tb.restart()
            self.assertEqual(public_key_pem(tb.thread.public_key), pem)
            bad = BrokerConfig(listen='127.0.0.1:0', cert=tb.config.cert, key=tb.config.key,
                               store_dir=tb.store_dir, huk_seed=os.urandom(32))
            with self.assertRaises(UnsealFailed):
                BrokerThread(bad).start()
        finally:
            tb.close()

    def test_process_kill_and_sigterm(self):
        ids = ['n%02d' % i for i in range(6)]
        tb = BrokerFixture(''.join('user %s\ntopic readwrite ward/#\n' % cid for cid in ids), capacity=2)
        try:
            key_path = os.path.join(tb.root, 'n00.key')
            keys = {'n00': write_key_file(key_path)}
            keys.update((cid, generate_client_key()) for cid in ids[1:])
            cpu_path = os.path.join(tb.root, 'cpu.csv')
            tb.config.cpu_log = cpu_path

            proc = BrokerProcess(tb.config).start()

            def config(cid):
                kwargs = {'key_source': 'file', 'key_file': key_path} if cid == 'n00' else {}
                return tb.client_config(cid, broker='127.0.0.1:%d' % proc.port, **kwargs)

            async def handshakes():
                for cid in ids:
                    c = await open_client(config(cid), key=None if cid == 'n00' else keys[cid])
                    self.assertTrue(c.handshake_complete)
                    await c.close()

            run(handshakes())
            proc.kill()

            # keys written through at provisioning survive SIGKILL
            ctx = TrustedContext.open(tb.store_dir, tb.seed)
            for cid in ids:
                self.assertEqual(ctx.cache_get(cid), keys[cid])
            self.assertEqual(public_key_pem(ctx.public_key), public_key_pem(load_public_key(tb.pubkey_path)))

            # a restarted broker re-encrypts for every client without new handshakes
            proc = BrokerProcess(tb.config).start()

            async def traffic():
                clients = [await open_client(config(cid), key=keys[cid], handshake=False) for cid in ids]
                for c in clients:
                    await c.subscribe('ward/%s' % c.client_id)
                for i, c in enumerate(clients):
                    await c.publish('ward/%s' % ids[(i + 1) % len(ids)], b'from ' + c.client_id.encode())
                got = {}
                for c in clients:
                    msg = await c.next_message(timeout=10)
                    got[c.client_id] = (msg.topic, msg.payload)
                errors = [c.errors for c in clients]
                for c in clients:
                    await c.close()
                return got, errors

            got, errors = run(traffic())
            self.assertEqual(errors, [[]] * len(ids))
            self.assertEqual(got, {cid: ('ward/%s' % cid, b'from ' + ids[i - 1].encode()) for i, cid in enumerate(ids)})
            time.sleep(1.5)
            self.assertEqual(proc.stop(), 0)
            with open(cpu_path) as f:
                lines = f.read().splitlines()
            self.assertEqual(lines[0], 'second,cpu_percent,monotonic')
            self.assertGreaterEqual(len(lines), 2)
        finally:
            tb.close()

    def test_subscription_table(self):
        t = SubscriptionTable()
        self.assertTrue(t.add('a', 'x'))
        self.assertFalse(t.add('a', 'x'))
        t.add('a', 'y')
        t.add('b', 'x')
        self.assertEqual(t.subscribers('a'), ['x', 'y'])
        self.assertEqual(len(t), 3)
        self.assertEqual(t.prune(lambda topic, cid: cid != 'y'), [('a', 'y')])
        t.remove_client('x')
        self.assertEqual(t.topics(), [])
