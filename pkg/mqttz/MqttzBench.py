#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Benchmark harness: re-encryption phase breakdown, key cache latency, dissemination
delay per broker mode, subscriber scaling and the hospital-floor telemetry workload.
Every scenario returns a `ScenarioResult` whose `samples` table is what gets written to
CSV; `check_*` functions turn results into pass/fail verdicts.

Timings are taken with `time.perf_counter_ns` and reported in microseconds.
"""

import argparse
import asyncio
import logging
import os
import struct
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import stats
from tqdm import tqdm

from mqttz.MqttzBroker import BrokerProcess, BrokerThread
from mqttz.MqttzClient import open_client
from mqttz.MqttzConfig import BrokerConfig, ClientConfig, write_key_file
from mqttz.MqttzCrypto import (HUK_SEED_LEN, decrypt_payload, derive_storage_key, encrypt_payload,
                               generate_broker_keypair, generate_client_key, wrap_client_key)
from mqttz.MqttzErrors import EmptySamples, MessageLoss, MqttzError
from mqttz.MqttzKeyCache import LruKeyCache
from mqttz.MqttzLog import configure_logging, get_logger, log_event
from mqttz.MqttzSecureStore import SecureStore
from mqttz.MqttzTls import make_dev_ca
from mqttz.MqttzTrustedCore import DEFAULT_CACHE_CAPACITY, TrustedContext, TrustedGateway
from mqttz.MqttzWorkload import (EcgGenerator, SlidingWindowLimiter, WorkloadSpec, max_window_bytes,
                                 parse_frame_header, plan_workload)

log = get_logger('bench')

DEFAULT_BLOCK_SIZES = (20, 200, 2000, 4096, 20000)
PHASES = ('retrieve_dec_key', 'retrieve_enc_key', 'decrypt', 'encrypt', 'total')
MICRO_MODES = ('ree', 'tee-mem', 'tee-store')
BROKER_MODES = ('vanilla', 'ree', 'tee', 'tee-store')
# a single cached key: re-encryptions unseal both keys and write one back
STORE_BOUND_CAPACITY = 1
DEFAULT_CAPACITIES = (12, 64, 128)
DEFAULT_SUBSCRIBER_COUNTS = (1, 2, 4, 8, 16)
LATENCY_PAYLOAD = 4096
LATENCY_TOPIC = 'bench/latency'
SEQ_HEADER = struct.Struct('>QQ')

MICRO_COLUMNS = ['scenario', 'run', 'phase', 'block_size', 'value_us']
CACHE_COLUMNS = ['scenario', 'capacity', 'run', 'query', 'hit', 'value_us']
MACRO_COLUMNS = ['scenario', 'msg_seq', 'delay_us']
SCALING_COLUMNS = ['scenario', 'subscribers', 'msg_seq', 'delay_us']
WORKLOAD_COLUMNS = ['second', 'publisher', 'bytes']
SUMMARY_KEYS = ('min', 'p25', 'p50', 'p75', 'p90', 'p99', 'max', 'mean', 'stddev')


@dataclass
class ScenarioResult:
    """
    :var string name: scenario label
    :var pandas.DataFrame samples: raw samples (the CSV content)
    :var dict report: derived values (medians, fits, counters, ...)
    """
    name: str
    samples: pd.DataFrame
    report: dict = field(default_factory=dict)

    def to_csv(self, path):
        self.samples.to_csv(path, index=False)


def summarize(samples):
    """
    Percentile summary with nearest-rank percentiles.

    :param array-like samples: values
    :return: dict with min, p25, p50, p75, p90, p99, max, mean, stddev (sample, ddof=1)
    :raises EmptySamples: if there are no samples
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySamples('no samples to summarize')
    p = np.percentile(x, [25, 50, 75, 90, 99], method='inverted_cdf')
    if x.size > 1:
        d = stats.describe(x)
        mean, stddev = float(d.mean), float(np.sqrt(d.variance))
    else:
        mean, stddev = float(x[0]), 0.0
    return {'min': float(x.min()), 'p25': float(p[0]), 'p50': float(p[1]), 'p75': float(p[2]),
            'p90': float(p[3]), 'p99': float(p[4]), 'max': float(x.max()), 'mean': mean, 'stddev': stddev}


def summary_table(df, by, value='value_us'):
    """`summarize` per group, one row per group."""
    rows = {key: summarize(group[value]) for key, group in df.groupby(by)}
    table = pd.DataFrame.from_dict(rows, orient='index', columns=list(SUMMARY_KEYS))
    table.index.name = by if isinstance(by, str) else None
    return table


def fit_line(x, y):
    """
    Least-squares line through (x, y).

    :return: (slope, intercept, r2)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError('need at least two points to fit a line')
    res = sm.OLS(y, sm.add_constant(x)).fit()
    r2 = float(res.rsquared)
    if not np.isfinite(r2):
        # constant y: a flat line fits exactly
        r2 = 1.0 if np.allclose(res.resid, 0) else 0.0
    return float(res.params[1]), float(res.params[0]), r2


def cdf_points(values):
    """
    :return: (sorted values, cumulative fraction) numpy arrays
    """
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise EmptySamples('no samples for a CDF')
    return x, np.arange(1, x.size + 1) / x.size


def percentile_table(matrix, index=None):
    """
    Per-row min/p25/p50/p75/max of a 2D array (rows: seconds, columns: publishers).

    :return: pandas.DataFrame
    """
    matrix = np.asarray(matrix, dtype=float)
    q = np.percentile(matrix, [0, 25, 50, 75, 100], axis=1, method='inverted_cdf')
    return pd.DataFrame(q.T, columns=['min', 'p25', 'p50', 'p75', 'max'], index=index)


# -- trusted core micro-benchmarks ----------------------------------------------------

def run_reencrypt_micro(block_sizes=DEFAULT_BLOCK_SIZES, mode='tee-mem', runs=100, world_switch_us=0.0,
                        prog=True, seed=None):
    """
    Time each phase of a re-encryption for several block sizes.

    * ``ree``: re-encryption called inline.
    * ``tee-mem``: through the serialized gateway, keys cached in memory.
    * ``tee-store``: as tee-mem but the cache is flushed before every run, so both keys
      come from the sealed store.

    :param tuple block_sizes: plaintext sizes in bytes
    :param string mode: one of ree, tee-mem, tee-store
    :param int runs: repetitions per block size
    :param float world_switch_us: simulated gateway cost (not part of the phase timings)
    :param bool prog: show a progress bar
    :param int/NoneType seed: payload seed
    :return: ScenarioResult with columns scenario, run, phase, block_size, value_us
    """
    if mode not in MICRO_MODES:
        raise ValueError('mode must be one of %s' % ', '.join(MICRO_MODES))
    rng = np.random.default_rng(seed)
    rows = []
    with tempfile.TemporaryDirectory(prefix='mqttz-micro-') as tmp:
        ctx = TrustedContext.open(tmp, os.urandom(HUK_SEED_LEN), capacity=DEFAULT_CACHE_CAPACITY)
        gateway = TrustedGateway(ctx, serialized=(mode != 'ree'), world_switch_us=world_switch_us)
        try:
            keys = {}
            for cid in ('origin', 'dest'):
                keys[cid] = generate_client_key()
                gateway.call('provision', cid, wrap_client_key(gateway.public_key, keys[cid]))
            bar = tqdm(total=len(block_sizes) * runs, desc='micro %s' % mode, mininterval=0.5, disable=not(prog))
            for size in block_sizes:
                plaintext = rng.bytes(size)
                env = encrypt_payload(keys['origin'], plaintext)
                for run in range(runs):
                    if mode == 'tee-store':
                        gateway.flush()
                    out, timing = gateway.call('reencrypt', 'origin', 'dest', env)
                    if run == 0 and decrypt_payload(keys['dest'], out) != plaintext:
                        raise MqttzError('re-encryption returned a wrong plaintext')
                    for phase, value in timing.as_dict().items():
                        rows.append((mode, run, phase, size, value))
                    bar.update()
            bar.close()
        finally:
            gateway.close()
    df = pd.DataFrame(rows, columns=MICRO_COLUMNS)
    return ScenarioResult(mode, df, {'block_sizes': list(block_sizes), 'runs': runs})


def run_cache_bench(total_keys=128, capacities=DEFAULT_CAPACITIES, queries=128, runs=100, prog=True, seed=None):
    """
    Key lookup latency against cache capacity. Each run builds a fresh trusted core,
    preloads `total_keys` keys (the last `capacity` of them stay cached), then times
    `queries` uniformly random lookups.

    :return: ScenarioResult with columns scenario, capacity, run, query, hit, value_us;
             ``report['counts']`` has hits/misses/evictions per (capacity, run)
    """
    rng = np.random.default_rng(seed)
    keypair = generate_broker_keypair()
    ids = ['client%03d' % i for i in range(total_keys)]
    keys = [generate_client_key() for _ in ids]
    rows, counts = [], []
    clock = time.perf_counter_ns
    bar = tqdm(total=len(capacities) * runs, desc='cache', mininterval=0.5, disable=not(prog))
    for capacity in capacities:
        for run in range(runs):
            with tempfile.TemporaryDirectory(prefix='mqttz-cache-') as tmp:
                store = SecureStore(tmp, derive_storage_key(os.urandom(HUK_SEED_LEN)))
                ctx = TrustedContext(keypair, LruKeyCache(capacity), store)
                for cid, key in zip(ids, keys):
                    ctx.cache_put(cid, key)
                ctx.cache.reset_counters()
                for q, idx in enumerate(rng.integers(0, total_keys, queries)):
                    misses = ctx.cache.misses
                    t0 = clock()
                    ctx.cache_get(ids[idx])
                    dt = (clock() - t0) / 1e3
                    rows.append(('cache-%d' % capacity, capacity, run, q, ctx.cache.misses == misses, dt))
                st = ctx.cache_stats()
                counts.append({'capacity': capacity, 'run': run, 'hits': st['hits'], 'misses': st['misses'],
                               'evictions': st['evictions']})
            bar.update()
    bar.close()
    df = pd.DataFrame(rows, columns=CACHE_COLUMNS)
    return ScenarioResult('cache', df, {'counts': pd.DataFrame(counts), 'total_keys': total_keys})


# -- broker benchmarks -----------------------------------------------------------------

class BenchBroker(object):
    """
    Throwaway broker for one scenario: temp store, dev certificates (except vanilla),
    an ACL for the given clients and a running broker thread or process.

    :param string mode: vanilla, ree, tee or tee-store (a tee broker whose key cache holds
        one key, so re-encryptions fetch keys from the sealed store)
    :param dict grants: client id -> list of (permission, pattern)
    :param bool process: run the broker in its own process (needed for CPU logging)
    """

    def __init__(self, mode, grants, world_switch_us=0.0, capacity=DEFAULT_CACHE_CAPACITY,
                 process=False, cpu_log=False):
        if mode not in BROKER_MODES:
            raise ValueError('mode must be one of %s' % ', '.join(BROKER_MODES))
        self.mode = mode
        self.grants = grants
        self.world_switch_us = world_switch_us
        self.capacity = capacity
        self.process = process
        self.cpu_log = cpu_log
        self.runner = None
        self._tmp = None

    def __enter__(self):
        self._tmp = tempfile.TemporaryDirectory(prefix='mqttz-bench-')
        root = self._tmp.name
        cert = key = self.ca_file = None
        if self.mode != 'vanilla':
            paths = make_dev_ca(os.path.join(root, 'certs'))
            cert, key, self.ca_file = paths['server_cert'], paths['server_key'], paths['ca_cert']
        acl_path = os.path.join(root, 'acl.conf')
        with open(acl_path, 'w') as f:
            for cid, entries in self.grants.items():
                f.write('user %s\n' % cid)
                for permission, pattern in entries:
                    f.write('topic %s %s\n' % (permission, pattern))
        # vanilla forwards envelopes untouched, so every client needs the same key
        self.key_file = None
        if self.mode == 'vanilla':
            self.key_file = os.path.join(root, 'shared.key')
            write_key_file(self.key_file)
        self.pubkey_path = os.path.join(root, 'broker_pub.pem')
        self.cpu_path = os.path.join(root, 'cpu.csv') if self.cpu_log else None
        broker_mode, capacity = self.mode, self.capacity
        if self.mode == 'tee-store':
            broker_mode, capacity = 'tee', STORE_BOUND_CAPACITY
        config = BrokerConfig(listen='127.0.0.1:0', cert=cert, key=key, acl=acl_path,
                              store_dir=os.path.join(root, 'store'), cache_capacity=capacity,
                              export_pubkey=self.pubkey_path, mode=broker_mode, huk_seed=os.urandom(HUK_SEED_LEN),
                              world_switch_us=self.world_switch_us, cpu_log=self.cpu_path)
        self.runner = BrokerProcess(config) if self.process else BrokerThread(config)
        try:
            self.runner.start()
        except BaseException:
            self._tmp.cleanup()
            raise
        return self

    def __exit__(self, *exc):
        self.stop()
        self._tmp.cleanup()

    def stop(self):
        if self.runner is not None:
            self.runner.stop()
            self.runner = None

    @property
    def port(self):
        return self.runner.port

    @property
    def broker(self):
        """In-process `Broker` (thread runner only)."""
        return self.runner.broker

    def client_config(self, client_id):
        return ClientConfig(client_id, broker='127.0.0.1:%d' % self.port, pubkey_path=self.pubkey_path,
                            key_source='file' if self.key_file else 'random', key_file=self.key_file,
                            ca_file=self.ca_file)

    def read_cpu_log(self):
        return pd.read_csv(self.cpu_path) if self.cpu_path and os.path.exists(self.cpu_path) else None


def _readwrite_all(ids):
    return {cid: [('readwrite', 'bench/#')] for cid in ids}


async def _closed_loop(pub, subs, n_messages, payload_size, timeout, bar):
    """Publish one message at a time and wait until every subscriber has it."""
    filler = bytes(max(0, payload_size - SEQ_HEADER.size))
    out = []
    for seq in range(n_messages):
        sent_ns = time.perf_counter_ns()
        await pub.publish(LATENCY_TOPIC, SEQ_HEADER.pack(seq, sent_ns) + filler)
        last_ns = 0
        for sub in subs:
            try:
                msg = await sub.next_message(timeout)
            except asyncio.TimeoutError:
                msg = None
            if msg is None:
                raise MessageLoss('message %d never reached %s' % (seq, sub.client_id))
            got_seq, _ = SEQ_HEADER.unpack_from(msg.payload)
            if got_seq != seq:
                raise MessageLoss('%s expected message %d, got %d' % (sub.client_id, seq, got_seq))
            last_ns = max(last_ns, msg.received_ns)
        out.append((seq, (last_ns - sent_ns) / 1e3))
        bar.update()
    if pub.errors:
        raise MqttzError('broker refused publishes: %s' % pub.errors)
    return out


async def _dissemination_session(env, n_subscribers, n_messages, payload_size, timeout, bar):
    subs = []
    for i in range(n_subscribers):
        sub = await open_client(env.client_config('sub%02d' % i))
        await sub.subscribe(LATENCY_TOPIC)
        subs.append(sub)
    pub = await open_client(env.client_config('pub'))
    try:
        return await _closed_loop(pub, subs, n_messages, payload_size, timeout, bar)
    finally:
        for c in subs + [pub]:
            await c.close()


def run_latency_macro(mode='tee', n_messages=500, payload_size=LATENCY_PAYLOAD, world_switch_us=0.0,
                      prog=True, timeout=10.0):
    """
    One publisher, one subscriber, closed loop: each message is sent once the previous
    one arrived. Delay is subscriber arrival minus publisher send, same host clock.

    :return: ScenarioResult with columns scenario, msg_seq, delay_us; report has 'median' and
             'store_fetches_per_message' (keys the trusted core unsealed from the store)
    :raises MessageLoss: if a message does not arrive within `timeout` seconds
    """
    ids = ['pub', 'sub00']
    bar = tqdm(total=n_messages, desc='latency %s' % mode, mininterval=0.5, disable=not(prog))
    with BenchBroker(mode, _readwrite_all(ids), world_switch_us=world_switch_us) as env:
        rows = asyncio.run(_dissemination_session(env, 1, n_messages, payload_size, timeout, bar))
        misses = env.broker.gateway.stats()['misses']
    bar.close()
    df = pd.DataFrame([(mode, s, d) for s, d in rows], columns=MACRO_COLUMNS)
    report = summarize(df['delay_us'])
    report['median'] = report['p50']
    report['store_fetches_per_message'] = misses / float(n_messages)
    log_event(log, 'latency_done', mode=mode, messages=n_messages, median_us=report['median'])
    return ScenarioResult(mode, df, report)


def run_subscriber_scaling(mode='tee', subscriber_counts=DEFAULT_SUBSCRIBER_COUNTS, n_messages=100,
                           payload_size=LATENCY_PAYLOAD, world_switch_us=0.0, prog=True, timeout=10.0):
    """
    Median delay to the last-served subscriber for each subscriber count, each on a
    fresh broker, plus a least-squares line over (count, median).

    :return: ScenarioResult with columns scenario, subscribers, msg_seq, delay_us; report has
             'medians' (count -> median), 'fit' (slope, intercept, r2),
             'calls_per_publish' (count -> trusted re-encryptions per publish) and
             'store_fetches_per_publish' (count -> keys unsealed from the store per publish)
    """
    rows, medians, calls, fetches = [], {}, {}, {}
    bar = tqdm(total=len(subscriber_counts) * n_messages, desc='scaling %s' % mode, mininterval=0.5,
               disable=not(prog))
    for count in subscriber_counts:
        ids = ['pub'] + ['sub%02d' % i for i in range(count)]
        with BenchBroker(mode, _readwrite_all(ids), world_switch_us=world_switch_us) as env:
            before = env.broker.gateway.reencrypt_calls
            delays = asyncio.run(_dissemination_session(env, count, n_messages, payload_size, timeout, bar))
            calls[count] = (env.broker.gateway.reencrypt_calls - before) / float(n_messages)
            fetches[count] = env.broker.gateway.stats()['misses'] / float(n_messages)
        rows.extend(('scaling-%s' % mode, count, s, d) for s, d in delays)
        medians[count] = summarize([d for _, d in delays])['p50']
    bar.close()
    df = pd.DataFrame(rows, columns=SCALING_COLUMNS)
    counts = sorted(medians)
    fit = fit_line(counts, [medians[c] for c in counts]) if len(counts) > 1 else (float('nan'),) * 3
    return ScenarioResult('scaling-%s' % mode, df, {'medians': medians, 'fit': fit, 'calls_per_publish': calls,
                                                   'store_fetches_per_publish': fetches})


async def _medtech_session(env, spec, idle_seconds, grace, prog):
    rng = np.random.default_rng(spec.seed)
    monitor = await open_client(env.client_config('monitor'))
    for p in range(spec.publishers):
        await monitor.subscribe(spec.topic(p))
    pubs = [await open_client(env.client_config('patient%02d' % p)) for p in range(spec.publishers)]
    plan = plan_workload(spec, rng)
    received = set()

    async def collect():
        async for msg in monitor.messages():
            publisher, seq, _ = parse_frame_header(msg.payload)
            received.add((publisher, seq))

    collector = asyncio.ensure_future(collect())
    idle_start = time.monotonic()
    await asyncio.sleep(idle_seconds)
    start = time.monotonic()
    sends = []
    bar = tqdm(total=sum(len(s) for s in plan), desc='medtech', mininterval=0.5, disable=not(prog))

    async def publisher(p):
        limiter = SlidingWindowLimiter(spec.rate)
        gen = EcgGenerator(p, spec.message_size, rng=np.random.default_rng(rng.integers(1 << 31)))
        topic, nbytes = spec.topic(p), spec.frame_bytes(p)
        for offset in plan[p]:
            delay = start + offset - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            while True:
                wait = limiter.wait_time(time.monotonic() - start, nbytes)
                if wait <= 0:
                    break
                await asyncio.sleep(wait + 1e-4)
            now = time.monotonic() - start
            if not limiter.allows(now, nbytes):
                continue
            limiter.record(now, nbytes)
            seq = gen.seq
            await pubs[p].publish(topic, gen.next_frame(time.perf_counter_ns()))
            sends.append((p, seq, now, nbytes))
            bar.update()

    await asyncio.gather(*(publisher(p) for p in range(spec.publishers)))
    load_end = time.monotonic()
    bar.close()
    deadline = time.monotonic() + grace
    while len(received) < len(sends) and time.monotonic() < deadline:
        await asyncio.sleep(0.05)
    errors = sum(len(c.errors) for c in pubs)
    for c in pubs + [monitor]:
        await c.close()
    collector.cancel()
    try:
        await collector
    except asyncio.CancelledError:
        pass
    return {'sends': sends, 'received': received, 'idle_start': idle_start, 'load_start': start,
            'load_end': load_end, 'errors': errors}


def run_medtech_workload(spec=None, mode='tee', idle_seconds=2.0, grace=3.0, prog=True):
    """
    Patient monitors publishing rate-capped ECG frames to one monitoring subscriber;
    the broker runs in its own process and logs its CPU utilization every second.

    :param mqttz.WorkloadSpec/NoneType spec: workload (defaults: 50 monitors, 350 B/s, 60 s)
    :param string mode: broker mode
    :param float idle_seconds: connected-but-idle period measured before the load
    :param float grace: seconds to wait for in-flight deliveries after the last send
    :return: ScenarioResult with columns second, publisher, bytes; report has 'aggregate'
             (bytes per second), 'percentiles', 'max_window_bytes', 'sent', 'lost', 'cpu',
             'cpu_idle_mean' and 'cpu_load_mean'
    """
    spec = spec or WorkloadSpec()
    grants = {'patient%02d' % p: [('write', spec.topic(p))] for p in range(spec.publishers)}
    grants['monitor'] = [('read', '#')]
    with BenchBroker(mode, grants, process=True, cpu_log=True) as env:
        run = asyncio.run(_medtech_session(env, spec, idle_seconds, grace, prog))
        env.stop()
        cpu = env.read_cpu_log()

    sends = pd.DataFrame(run['sends'], columns=['publisher', 'seq', 't', 'bytes'])
    sends['second'] = np.floor(sends['t']).astype(int)
    seconds = np.arange(int(np.ceil(spec.duration)))
    df = sends.groupby(['second', 'publisher'], as_index=False)['bytes'].sum()[WORKLOAD_COLUMNS]
    matrix = (df.pivot(index='second', columns='publisher', values='bytes')
              .reindex(index=seconds, columns=range(spec.publishers)).fillna(0))
    windows = {p: max_window_bytes(g['t'], g['bytes']) for p, g in sends.groupby('publisher')}
    lost = {(p, s) for p, s in zip(sends['publisher'], sends['seq'])} - run['received']

    report = {'aggregate': matrix.sum(axis=1), 'percentiles': percentile_table(matrix.values, index=seconds),
              'max_window_bytes': max(windows.values()) if windows else 0, 'sent': len(sends),
              'lost': len(lost), 'refused': run['errors'], 'cpu': cpu}
    if cpu is not None and len(cpu):
        t = cpu['monotonic'].values
        idle = (t >= run['idle_start']) & (t + 1 <= run['load_start'])
        load = (t >= run['load_start']) & (t + 1 <= run['load_end'])
        report['cpu_idle_mean'] = float(cpu['cpu_percent'][idle].mean()) if idle.any() else float('nan')
        report['cpu_load_mean'] = float(cpu['cpu_percent'][load].mean()) if load.any() else float('nan')
    log_event(log, 'medtech_done', sent=report['sent'], lost=report['lost'])
    return ScenarioResult('medtech', df, report)


# -- verdicts ----------------------------------------------------------------------------

def check_micro_additivity(result, tolerance=0.05):
    df = result.samples
    wide = df.pivot_table(index=['block_size', 'run'], columns='phase', values='value_us')
    parts = wide[list(PHASES[:-1])].sum(axis=1)
    bad = int(((parts - wide['total']).abs() > tolerance * wide['total'] + 1e-9).sum())
    return bad == 0, '%s: %d samples whose phases do not add up to the total' % (result.name, bad)


def check_store_dominance(mem_result, store_result):
    def dec_means(r):
        d = r.samples[r.samples['phase'] == 'retrieve_dec_key']
        return d.groupby('block_size')['value_us'].mean()
    mem, store = dec_means(mem_result), dec_means(store_result)
    worse = [int(b) for b in mem.index if not store[b] > mem[b]]
    return not worse, 'tee-store key fetch slower than tee-mem at every block size (failing: %s)' % (worse or 'none')


def check_cache_shape(result):
    df = result.samples
    means = df.groupby('capacity')['value_us'].mean()
    caps = sorted(means.index)
    ordered = all(means[a] > means[b] for a, b in zip(caps, caps[1:]))
    counts = result.report['counts']
    full = [c for c in caps if c >= result.report['total_keys']]
    no_miss = all(counts[counts['capacity'] == c]['misses'].sum() == 0 for c in full)
    msg = 'mean lookup %s; full-capacity misses %s' % (
        ' > '.join('%d:%.1fus' % (c, means[c]) for c in caps), 'zero' if no_miss else 'present')
    return ordered and no_miss, msg


def check_latency_order(results):
    """
    :param dict results: mode -> ScenarioResult from `run_latency_macro`
    """
    modes = [m for m in BROKER_MODES if m in results]
    medians = [results[m].report['median'] for m in modes]
    ok = all(a < b for a, b in zip(medians, medians[1:]))
    msg = 'median delay %s' % ' < '.join('%s:%.0fus' % (m, v) for m, v in zip(modes, medians))
    if 'vanilla' in results and 'tee' in results:
        msg += ' (tee/vanilla %.2fx)' % (results['tee'].report['median'] / results['vanilla'].report['median'])
    if 'tee' in results and 'tee-store' in results:
        msg += ' (tee-store/tee %.2fx)' % (results['tee-store'].report['median'] / results['tee'].report['median'])
    return ok, msg


def check_scaling(result, min_r2=0.9):
    medians = result.report['medians']
    counts = sorted(medians)
    monotone = all(medians[a] <= medians[b] for a, b in zip(counts, counts[1:]))
    calls_ok = all(result.report['calls_per_publish'][c] == c for c in counts)
    r2 = result.report['fit'][2]
    ok = monotone and calls_ok and r2 >= min_r2
    return ok, 'monotone=%s R2=%.3f calls_per_publish_exact=%s' % (monotone, r2, calls_ok)


def check_medtech(result, spec, band=(3000.0, 5000.0), slack=0.2, min_fraction=0.8):
    agg = result.report['aggregate']
    lo, hi = band[0] * (1 - slack), band[1] * (1 + slack)
    fraction = float(((agg >= lo) & (agg <= hi)).mean())
    window_ok = result.report['max_window_bytes'] <= spec.rate
    ok = fraction >= min_fraction and result.report['lost'] == 0 and window_ok
    return ok, 'seconds in band %.0f%%, lost %d, max 1 s window %d B' % (
        100 * fraction, result.report['lost'], result.report['max_window_bytes'])


# -- command line ------------------------------------------------------------------------

def _print_checks(checks):
    failed = 0
    for ok, msg in checks:
        print('[%s] %s' % ('PASS' if ok else 'FAIL', msg))
        failed += not ok
    return failed


def _write(result, out, suffix=None):
    if out is None:
        return
    path = out if suffix is None else '%s-%s%s' % (os.path.splitext(out)[0], suffix, os.path.splitext(out)[1] or '.csv')
    result.to_csv(path)
    print('wrote %s' % path)


def _cmd_micro(args):
    from mqttz import MqttzPlot
    modes = MICRO_MODES if args.mode in (None, 'all') else (args.mode,)
    results = {m: run_reencrypt_micro(mode=m, runs=args.runs or 100, prog=not args.no_prog, seed=args.seed)
               for m in modes}
    if len(results) == 1:
        _write(results[modes[0]], args.out)
    else:
        combined = ScenarioResult('micro', pd.concat([r.samples for r in results.values()], ignore_index=True))
        _write(combined, args.out)
    for m, r in results.items():
        print('\n%s' % m)
        print(summary_table(r.samples[r.samples['phase'] != 'total'], ['block_size', 'phase'])[['p50', 'mean', 'stddev']])
    checks = [check_micro_additivity(r) for r in results.values()]
    if 'tee-mem' in results and 'tee-store' in results:
        checks.append(check_store_dominance(results['tee-mem'], results['tee-store']))
    if args.plot:
        MqttzPlot.plot_phase_breakdown(pd.concat([r.samples for r in results.values()]), save=args.plot)
    return checks


def _cmd_cache(args):
    from mqttz import MqttzPlot
    r = run_cache_bench(runs=args.runs or 100, prog=not args.no_prog, seed=args.seed)
    _write(r, args.out)
    print(summary_table(r.samples, 'capacity'))
    print(r.report['counts'].groupby('capacity')[['hits', 'misses', 'evictions']].mean())
    if args.plot:
        MqttzPlot.plot_cache_cdf(r.samples, save=args.plot)
    return [check_cache_shape(r)]


def _cmd_latency(args):
    from mqttz import MqttzPlot
    modes = BROKER_MODES if args.mode in (None, 'all') else (args.mode,)
    results = {m: run_latency_macro(m, n_messages=args.messages or 500, world_switch_us=args.world_switch_us,
                                    prog=not args.no_prog) for m in modes}
    for m, r in results.items():
        _write(r, args.out, suffix=m if len(results) > 1 else None)
        print('%-8s median %.1f us  p90 %.1f us  p99 %.1f us' % (m, r.report['median'], r.report['p90'], r.report['p99']))
    if args.plot:
        MqttzPlot.plot_latency_cdf({m: r.samples['delay_us'] for m, r in results.items()}, save=args.plot)
    return [check_latency_order(results)] if len(results) > 1 else []


def _cmd_scaling(args):
    from mqttz import MqttzPlot
    counts = tuple(int(c) for c in args.subscribers.split(',')) if args.subscribers else DEFAULT_SUBSCRIBER_COUNTS
    mode = args.mode if args.mode not in (None, 'all') else 'tee'
    r = run_subscriber_scaling(mode, counts, n_messages=args.messages or 100,
                               world_switch_us=args.world_switch_us, prog=not args.no_prog)
    _write(r, args.out)
    slope, intercept, r2 = r.report['fit']
    for c in sorted(r.report['medians']):
        print('%3d subscribers: median %.1f us' % (c, r.report['medians'][c]))
    print('fit: %.1f us/subscriber + %.1f us, R2 %.3f' % (slope, intercept, r2))
    if args.plot:
        MqttzPlot.plot_scaling(r.report['medians'], r.report['fit'], save=args.plot)
    return [check_scaling(r)]


def _cmd_medtech(args):
    from mqttz import MqttzPlot
    spec = WorkloadSpec(publishers=args.publishers or 50, duration=args.duration or 60.0, seed=args.seed)
    mode = args.mode if args.mode not in (None, 'all') else 'tee'
    r = run_medtech_workload(spec, mode=mode, prog=not args.no_prog)
    _write(r, args.out)
    print(r.report['percentiles'].describe().loc[['mean', 'min', 'max']])
    print('sent %d  lost %d  broker CPU idle %.1f%%  under load %.1f%%'
          % (r.report['sent'], r.report['lost'], r.report.get('cpu_idle_mean', float('nan')),
             r.report.get('cpu_load_mean', float('nan'))))
    if args.plot:
        MqttzPlot.plot_throughput_percentiles(r.report['percentiles'], save=args.plot)
        if r.report['cpu'] is not None:
            base, ext = os.path.splitext(args.plot)
            MqttzPlot.plot_cpu(r.report['cpu'], save='%s-cpu%s' % (base, ext or '.png'))
    return [check_medtech(r, spec)]


def build_parser():
    parser = argparse.ArgumentParser(prog='mqttz-bench', description='Benchmarks for the mqttz broker and trusted core.')
    parser.add_argument('scenario', choices=('micro', 'cache', 'latency', 'scaling', 'medtech'))
    parser.add_argument('--mode', help='micro: ree|tee-mem|tee-store|all; latency/scaling/medtech: vanilla|ree|tee|tee-store|all')
    parser.add_argument('--runs', type=int, help='repetitions (micro, cache)')
    parser.add_argument('--messages', type=int, help='messages per run (latency, scaling)')
    parser.add_argument('--subscribers', help='comma separated subscriber counts (scaling)')
    parser.add_argument('--publishers', type=int, help='publishers (medtech)')
    parser.add_argument('--duration', type=float, help='seconds of load (medtech)')
    parser.add_argument('--world-switch-us', type=float, default=0.0, help='simulated trusted call cost')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', help='CSV output path')
    parser.add_argument('--plot', help='figure output path')
    parser.add_argument('--no-prog', action='store_true', help='hide progress bars')
    parser.add_argument('--log-level', default='WARNING')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(getattr(logging, args.log_level.upper(), logging.WARNING))
    commands = {'micro': _cmd_micro, 'cache': _cmd_cache, 'latency': _cmd_latency,
                'scaling': _cmd_scaling, 'medtech': _cmd_medtech}
    try:
        checks = commands[args.scenario](args)
    except MqttzError as e:
        print('mqttz-bench: %s' % e, file=sys.stderr)
        return 1
    return 1 if _print_checks(checks) else 0


if __name__ == '__main__':
    raise SystemExit(main())
