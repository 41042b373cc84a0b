"""
Synthetic hospital-floor telemetry: every patient monitor publishes small ECG frames,
never more than `rate` bytes in any one-second window, with a random subset of monitors
active each second so the floor as a whole stays around 3-5 kB/s.
"""

import struct
from collections import deque

import numpy as np

from mqttz.MqttzCrypto import BLOCK_LEN
from mqttz.MqttzProtocol import HEADER, IV_LEN, STR_LEN

FRAME_HEADER = struct.Struct('>HIQ')


class WorkloadSpec(object):
    """
    Parameters of the patient-monitor workload.

    :var int publishers: number of monitors
    :var int rate: per-publisher cap, bytes per second (frame bytes on the wire)
    :var int message_size: plaintext bytes per ECG frame
    :var float duration: seconds of load
    :var string topic_template: format string taking the publisher index
    :var int frames_per_second: frames an active monitor sends in one second
    :var tuple active_range: (min, max) monitors active in any second
    :var int/NoneType seed: random seed for the activity plan and signals
    """

    def __init__(self, publishers=50, rate=350, message_size=100, duration=60.0,
                 topic_template='hospital/floor1/patient{:02d}/ecg', frames_per_second=2,
                 active_range=(10, 13), seed=None):
        self.publishers = int(publishers)
        self.rate = int(rate)
        self.message_size = int(message_size)
        self.duration = float(duration)
        self.topic_template = topic_template
        self.frames_per_second = int(frames_per_second)
        self.active_range = (int(active_range[0]), int(active_range[1]))
        self.seed = seed

        if self.publishers < 1:
            raise ValueError('publishers must be positive')
        if self.rate <= 0:
            raise ValueError('rate must be positive')
        if self.duration <= 0:
            raise ValueError('duration must be positive')
        if self.message_size < FRAME_HEADER.size:
            raise ValueError('message_size must hold the %d byte frame header' % FRAME_HEADER.size)
        if self.frames_per_second < 1:
            raise ValueError('frames_per_second must be positive')
        lo, hi = self.active_range
        if lo < 0 or hi < lo:
            raise ValueError('active_range must satisfy 0 <= min <= max')
        if self.frames_per_second * self.frame_bytes(0) > self.rate:
            raise ValueError('%d frames of %d bytes exceed the %d B/s cap'
                             % (self.frames_per_second, self.frame_bytes(0), self.rate))

    def topic(self, publisher):
        return self.topic_template.format(publisher)

    def frame_bytes(self, publisher):
        """Bytes one PUBLISH frame of this workload occupies on the wire."""
        ciphertext = BLOCK_LEN * (self.message_size // BLOCK_LEN + 1)
        return HEADER.size + STR_LEN.size + len(self.topic(publisher).encode('utf-8')) + IV_LEN + ciphertext

    def __repr__(self):
        return ('WorkloadSpec(publishers=%d, rate=%d B/s, message_size=%d, duration=%gs, active=%d..%d)'
                % (self.publishers, self.rate, self.message_size, self.duration, *self.active_range))


class SlidingWindowLimiter(object):
    """
    Byte budget over a sliding half-open window: at time t the sends counted are those
    in (t - window, t].
    """

    def __init__(self, rate, window=1.0):
        if rate <= 0:
            raise ValueError('rate must be positive')
        self.rate = rate
        self.window = window
        self._sent = deque()
        self._total = 0

    def _expire(self, now):
        while self._sent and self._sent[0][0] <= now - self.window:
            self._total -= self._sent.popleft()[1]

    def allows(self, now, nbytes):
        self._expire(now)
        return self._total + nbytes <= self.rate

    def wait_time(self, now, nbytes):
        """Seconds until `nbytes` fits the budget (0 if it fits now)."""
        self._expire(now)
        if nbytes > self.rate:
            raise ValueError('a single send of %d bytes exceeds the %d byte budget' % (nbytes, self.rate))
        excess = self._total + nbytes - self.rate
        if excess <= 0:
            return 0.0
        freed = 0
        for t, n in self._sent:
            freed += n
            if freed >= excess:
                # entry t leaves the window at t + window
                return max(0.0, t + self.window - now)
        return 0.0

    def record(self, now, nbytes):
        self._expire(now)
        self._sent.append((now, nbytes))
        self._total += nbytes


def max_window_bytes(times, sizes, window=1.0):
    """
    Largest byte count inside any half-open window [s, s + window).

    :param array-like times: send times in seconds
    :param array-like sizes: bytes per send
    :return: int
    """
    order = np.argsort(times, kind='stable')
    times = np.asarray(times, dtype=float)[order]
    sizes = np.asarray(sizes)[order]
    best = total = 0
    lo = 0
    for hi in range(len(times)):
        total += sizes[hi]
        while times[hi] - times[lo] >= window:
            total -= sizes[lo]
            lo += 1
        best = max(best, total)
    return int(best)


class EcgGenerator(object):
    """
    Fixed-size synthetic ECG frames: (publisher, sequence number, send timestamp) header
    followed by int8 samples of a noisy heartbeat-like waveform.
    """

    def __init__(self, publisher, message_size=100, rng=None):
        self.publisher = publisher
        self.message_size = message_size
        self.seq = 0
        self.rng = rng if rng is not None else np.random.default_rng()
        self._phase = self.rng.uniform(0, 2 * np.pi)
        self._bpm = self.rng.uniform(55, 95)

    def next_frame(self, timestamp_ns):
        n = self.message_size - FRAME_HEADER.size
        t = self._phase + np.arange(n) * (2 * np.pi * self._bpm / 60.0 / 250.0)
        beat = np.exp(-((np.mod(t, 2 * np.pi) - np.pi) ** 2) * 40.0)
        wave = 90 * beat + 8 * np.sin(t) + self.rng.normal(0, 3, n)
        self._phase = t[-1]
        samples = np.clip(np.round(wave), -128, 127).astype(np.int8)
        frame = FRAME_HEADER.pack(self.publisher, self.seq, timestamp_ns) + samples.tobytes()
        self.seq += 1
        return frame


def parse_frame_header(payload):
    """:return: (publisher, seq, timestamp_ns)"""
    return FRAME_HEADER.unpack_from(payload, 0)


def plan_workload(spec, rng=None):
    """
    Decide when each monitor sends. Every second a random subset of size in
    `active_range` is active; monitor p sends its frames at fixed offsets
    ``phase_p + i / frames_per_second`` inside that second, so two consecutive active
    seconds never put more than `frames_per_second` frames into one window.

    :param mqttz.WorkloadSpec spec: workload
    :param numpy.random.Generator/NoneType rng: random source (seeded from spec.seed if None)
    :return: list, one sorted array of send offsets (seconds from start) per publisher
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    step = 1.0 / spec.frames_per_second
    phase = rng.uniform(0, step * 0.9, spec.publishers)
    lo, hi = spec.active_range
    sends = [[] for _ in range(spec.publishers)]
    for second in range(int(np.ceil(spec.duration))):
        k = min(int(rng.integers(lo, hi + 1)), spec.publishers)
        for p in rng.choice(spec.publishers, size=k, replace=False):
            for i in range(spec.frames_per_second):
                t = second + phase[p] + i * step
                if t < spec.duration:
                    sends[p].append(t)
    return [np.sort(np.array(s)) for s in sends]
