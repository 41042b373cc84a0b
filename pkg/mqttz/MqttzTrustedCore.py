#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Simulated trusted application. It owns every client key, provisions keys during the
handshake, re-encrypts payloads from the publisher's key to each subscriber's key, and
keeps recently used keys in an LRU heap cache backed by the sealed store.

Nothing outside this module receives raw keys or plaintext: the broker talks to it
through `TrustedGateway`, whose calls only take and return envelopes, wrapped keys and
counters.
"""

import asyncio
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

from mqttz.MqttzCrypto import (decrypt_payload_buffer, derive_storage_key, encrypt_payload,
                               export_public_key, generate_broker_keypair, load_private_key_der,
                               private_key_der, unwrap_client_key, wipe)
from mqttz.MqttzErrors import NoKey, RecordNotFound, StoreIOError, UnsealFailed
from mqttz.MqttzKeyCache import LruKeyCache
from mqttz.MqttzLog import get_logger, log_event
from mqttz.MqttzSecureStore import SecureStore

ACK_PREFIX = b'MQTTZ-ACK:'
KEYPAIR_FILE = 'broker_keypair.sealed'
KEYPAIR_AD = b'mqttz-broker-keypair'
DEFAULT_CACHE_CAPACITY = 64

log = get_logger('trusted')


def ack_plaintext(client_id):
    return ACK_PREFIX + client_id.encode('utf-8')


@dataclass
class ReencryptTiming:
    """
    Phase durations of one re-encryption, in microseconds. The phases are measured
    back to back, so they add up to `total`.
    """
    retrieve_dec_key: float = 0.0
    retrieve_enc_key: float = 0.0
    decrypt: float = 0.0
    encrypt: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return asdict(self)


class TrustedContext(object):
    """
    State of the trusted application: broker keypair, LRU key cache and sealed store.
    Exactly one per broker process; all access goes through one `TrustedGateway`.

    :var RSAPrivateKey keypair: broker keypair (private half never leaves this object)
    :var mqttz.LruKeyCache cache: heap cache of client keys
    :var mqttz.SecureStore store: sealed persistent store
    :var bool aead: payloads use the AES-GCM extension instead of CBC
    """

    def __init__(self, keypair, cache, store, aead=False):
        self.keypair = keypair
        self.cache = cache
        self.store = store
        self.aead = aead

    @classmethod
    def open(cls, store_dir, huk_seed, capacity=DEFAULT_CACHE_CAPACITY, aead=False):
        """
        Derive the storage key from the HUK seed, then load the sealed broker keypair or
        generate and seal a new one on first start.

        :param string store_dir: secure store directory
        :param bytes huk_seed: 32-byte seed
        :param int capacity: LRU cache capacity
        :param bool aead: AES-GCM payload extension
        :return: TrustedContext
        :raises MissingSeed: if the seed is unset
        :raises UnsealFailed: if the stored keypair does not authenticate (eg a different seed)
        """
        store = SecureStore(store_dir, derive_storage_key(huk_seed))
        path = os.path.join(store_dir, KEYPAIR_FILE)
        try:
            priv = load_private_key_der(store.unseal_blob(path, KEYPAIR_AD, 'broker keypair'))
        except RecordNotFound:
            priv = generate_broker_keypair()
            store.seal_blob(path, private_key_der(priv), KEYPAIR_AD)
            log_event(log, 'keypair_generated', store_dir=store_dir)
        return cls(priv, LruKeyCache(capacity), store, aead=aead)

    @property
    def public_key(self):
        return self.keypair.public_key()

    def cache_get(self, client_id):
        """
        Key lookup: memory first, then the sealed store. A miss admits the unsealed key
        as most recent, writing back whatever it evicts.

        :param string client_id: owner
        :return: bytes -- 32-byte key
        :raises NoKey: if neither tier has the key
        :raises UnsealFailed: (a NoKey) if the stored record is corrupt; logged as an alarm
        """
        key = self.cache.lookup(client_id)
        if key is not None:
            return key
        try:
            key = self.store.store_unseal(client_id)
        except RecordNotFound:
            raise NoKey(client_id)
        except UnsealFailed:
            log_event(log, 'unseal_alarm', level=40, client_id=client_id)
            raise
        try:
            self._admit(client_id, key, write_through=False)
        except StoreIOError as e:
            # still a valid key, just not cached this time
            log_event(log, 'cache_admit_failed', level=30, client_id=client_id, error=str(e))
        return key

    def cache_put(self, client_id, key):
        """
        Insert or overwrite a key as most recent. The key is sealed to the store at once
        (write-through) and an evicted entry is sealed before it leaves memory
        (write-back). Both writes happen before the cache changes, so a failure leaves
        cache and store agreeing.

        :raises StoreIOError: if sealing fails; the key is then not provisioned
        """
        self._admit(client_id, key, write_through=True)

    def _admit(self, client_id, key, write_through):
        victim = self.cache.victim_for(client_id)
        if victim is not None:
            self.store.store_seal(victim[0], victim[1])
        if write_through:
            self.store.store_seal(client_id, key)
        self.cache.insert(client_id, key)

    def cache_stats(self):
        """Snapshot of hits, misses, evictions and size."""
        return self.cache.stats()

    def cache_flush(self):
        """Write every cached key back to the store and empty the cache."""
        for client_id, key in self.cache.drain():
            self.store.store_seal(client_id, key)

    def ta_provision_key(self, client_id, wrapped_key):
        """
        Handshake step inside the trusted application: unwrap the client key with the
        broker private key, store it, and return the ACK encrypted under that key.

        :param string client_id: client being provisioned
        :param bytes wrapped_key: 256-byte RSA-OAEP wrapped key
        :return: EncryptedEnvelope of ``b'MQTTZ-ACK:' + client_id``
        :raises UnwrapFailed: wrong public key or corrupted wrap
        :raises StoreIOError: the key could not be sealed (not provisioned)
        """
        key = unwrap_client_key(self.keypair, wrapped_key)
        self.cache_put(client_id, key)
        return encrypt_payload(key, ack_plaintext(client_id), aead=self.aead)

    def ta_reencrypt(self, origin, dest, env):
        """
        Decrypt under the origin's key and encrypt under the destination's key with a
        fresh IV. The intermediate plaintext is zeroed before returning.

        :return: (EncryptedEnvelope, ReencryptTiming)
        :raises NoKey: missing origin or destination key
        :raises BadPadding: envelope does not decrypt under the origin's key
        """
        clock = time.perf_counter_ns
        t0 = clock()
        dec_key = self.cache_get(origin)
        t1 = clock()
        enc_key = self.cache_get(dest)
        t2 = clock()
        buf = decrypt_payload_buffer(dec_key, env, aead=self.aead)
        t3 = clock()
        try:
            out = encrypt_payload(enc_key, buf, aead=self.aead)
        finally:
            wipe(buf)
        t4 = clock()
        timing = ReencryptTiming(retrieve_dec_key=(t1 - t0) / 1e3, retrieve_enc_key=(t2 - t1) / 1e3,
                                 decrypt=(t3 - t2) / 1e3, encrypt=(t4 - t3) / 1e3, total=(t4 - t0) / 1e3)
        return out, timing


class TrustedGateway(object):
    """
    The world switch. With `serialized=True` every call runs on one dedicated worker
    thread in FIFO order, like a single-threaded trusted application; with
    `serialized=False` calls run inline on the caller's thread (re-encryption in the
    untrusted world).

    :var collections.Counter calls: invocations per operation name
    :var float world_switch_us: simulated cost added to each serialized call
    """

    def __init__(self, ctx, serialized=True, world_switch_us=0.0):
        self._ctx = ctx
        self.serialized = serialized
        self.world_switch_us = float(world_switch_us)
        self.calls = Counter()
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix='mqttz-ta') if serialized else None

    def _invoke(self, name, fn, *args):
        self.calls[name] += 1
        if self.serialized and self.world_switch_us > 0:
            time.sleep(self.world_switch_us / 1e6)
        return fn(*args)

    def call(self, name, *args):
        """Blocking call into the trusted application."""
        fn = self._operation(name)
        if self._executor is None:
            return self._invoke(name, fn, *args)
        return self._executor.submit(self._invoke, name, fn, *args).result()

    async def acall(self, name, *args):
        """Awaitable call; other sessions keep running while this one waits its turn."""
        fn = self._operation(name)
        if self._executor is None:
            return self._invoke(name, fn, *args)
        return await asyncio.wrap_future(self._executor.submit(self._invoke, name, fn, *args))

    def _operation(self, name):
        ops = {'provision': self._ctx.ta_provision_key,
               'reencrypt': self._ctx.ta_reencrypt,
               'stats': self._ctx.cache_stats,
               'flush': self._ctx.cache_flush}
        try:
            return ops[name]
        except KeyError:
            raise ValueError('unknown trusted operation %r' % name)

    async def provision(self, client_id, wrapped_key):
        return await self.acall('provision', client_id, wrapped_key)

    async def reencrypt(self, origin, dest, env):
        return await self.acall('reencrypt', origin, dest, env)

    def stats(self):
        return self.call('stats')

    def flush(self):
        self.call('flush')

    @property
    def reencrypt_calls(self):
        return self.calls['reencrypt']

    @property
    def public_key(self):
        return self._ctx.public_key

    def export_public_key(self, path):
        export_public_key(self._ctx.public_key, path)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
