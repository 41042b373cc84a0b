import binascii
import os

from mqttz.MqttzCrypto import HUK_SEED_LEN, KEY_LEN, generate_client_key, load_public_key
from mqttz.MqttzErrors import MissingSeed
from mqttz.MqttzProtocol import validate_client_id

HUK_SEED_ENV = 'MQTTZ_HUK_SEED'
DEFAULT_LISTEN = '127.0.0.1:8883'
DEFAULT_CAPACITY = 64
MODES = ('vanilla', 'ree', 'tee')
KEY_SOURCES = ('random', 'file')


def read_huk_seed(environ=None):
    """
    Read the simulated hardware unique key from ``MQTTZ_HUK_SEED`` (64 hex characters).

    :param dict/NoneType environ: environment mapping, defaults to os.environ
    :return: bytes -- 32-byte seed
    :raises MissingSeed: if the variable is unset or empty
    :raises ValueError: if it is not 64 hex characters
    """
    environ = os.environ if environ is None else environ
    value = environ.get(HUK_SEED_ENV, '').strip()
    if not value:
        raise MissingSeed('%s is not set' % HUK_SEED_ENV)
    try:
        seed = binascii.unhexlify(value)
    except (binascii.Error, ValueError):
        raise ValueError('%s must be hex encoded' % HUK_SEED_ENV)
    if len(seed) != HUK_SEED_LEN:
        raise ValueError('%s must be %d hex characters' % (HUK_SEED_ENV, 2 * HUK_SEED_LEN))
    return seed


def parse_listen(listen):
    """
    :param string listen: 'host:port'
    :return: (host, port)
    """
    host, sep, port = str(listen).rpartition(':')
    if not sep or not host:
        raise ValueError('listen address must be host:port, got %r' % (listen,))
    try:
        port = int(port)
    except ValueError:
        raise ValueError('port must be an integer, got %r' % port)
    if port < 0 or port > 65535:
        raise ValueError('port out of range: %d' % port)
    return host, port


class BrokerConfig(object):
    """
    Broker settings. Explicit arguments win over the environment; the HUK seed falls
    back to ``MQTTZ_HUK_SEED``.

    :var string host: listen host
    :var int port: listen port (0 picks a free port)
    :var string/NoneType cert: TLS certificate (PEM)
    :var string/NoneType key: TLS private key (PEM)
    :var string/NoneType acl: ACL file; None means an empty table (deny everything)
    :var string store_dir: secure store directory
    :var int cache_capacity: LRU key cache capacity
    :var string/NoneType export_pubkey: where to write the broker public key (PEM)
    :var string mode: 'vanilla', 'ree' or 'tee'
    :var bytes huk_seed: 32-byte seed
    :var bool aead: AES-GCM payload extension
    :var float world_switch_us: simulated cost of each serialized trusted call
    :var string/NoneType cpu_log: CSV of per-second broker CPU utilization
    """

    def __init__(self, listen=DEFAULT_LISTEN, cert=None, key=None, acl=None, store_dir='mqttz-store',
                 cache_capacity=DEFAULT_CAPACITY, export_pubkey=None, mode='tee', huk_seed=None,
                 aead=False, world_switch_us=0.0, cpu_log=None):
        self.host, self.port = parse_listen(listen)
        self.cert = cert
        self.key = key
        self.acl = acl
        self.store_dir = store_dir
        self.cache_capacity = cache_capacity
        self.export_pubkey = export_pubkey
        self.mode = mode
        self.aead = bool(aead)
        self.world_switch_us = float(world_switch_us)
        self.cpu_log = cpu_log

        if mode not in MODES:
            raise ValueError('mode must be one of %s, got %r' % (', '.join(MODES), mode))
        if int(cache_capacity) != cache_capacity or cache_capacity < 1:
            raise ValueError('cache capacity must be a positive integer')
        if (cert is None) != (key is None):
            raise ValueError('cert and key must be given together')
        if cert is None and mode != 'vanilla':
            raise ValueError('TLS certificate and key are required in %s mode' % mode)
        if self.world_switch_us < 0:
            raise ValueError('world_switch_us must be non-negative')
        self.huk_seed = read_huk_seed() if huk_seed is None else huk_seed
        if len(self.huk_seed) != HUK_SEED_LEN:
            raise ValueError('HUK seed must be %d bytes' % HUK_SEED_LEN)

    @property
    def tls(self):
        return self.cert is not None

    @property
    def listen(self):
        return '%s:%d' % (self.host, self.port)

    def __repr__(self):
        # seed omitted
        return 'BrokerConfig(listen=%s, mode=%s, tls=%s, acl=%s, store_dir=%s, capacity=%d)' % (
            self.listen, self.mode, self.tls, self.acl, self.store_dir, self.cache_capacity)


class ClientConfig(object):
    """
    Client settings.

    :var string client_id: validated client id
    :var string host: broker host
    :var int port: broker port
    :var RSAPublicKey public_key: broker trusted-core public key
    :var string key_source: 'random' or 'file'
    :var string/NoneType key_file: 32-byte raw key file when key_source is 'file'
    :var string/NoneType ca_file: TLS trust root; None connects without TLS (vanilla brokers only)
    :var string server_hostname: name checked against the broker certificate
    :var bool aead: AES-GCM payload extension
    """

    def __init__(self, client_id, broker=DEFAULT_LISTEN, pubkey_path=None, public_key=None,
                 key_source='random', key_file=None, ca_file=None, server_hostname='localhost', aead=False):
        self.client_id = validate_client_id(client_id)
        self.host, self.port = parse_listen(broker)
        if public_key is None and pubkey_path is not None:
            public_key = load_public_key(pubkey_path)
        if public_key is None:
            raise ValueError('broker public key is required (pubkey_path or public_key)')
        self.public_key = public_key
        if key_source not in KEY_SOURCES:
            raise ValueError('key_source must be random or file, got %r' % (key_source,))
        if key_source == 'file' and key_file is None:
            raise ValueError('key_file is required when key_source is file')
        self.key_source = key_source
        self.key_file = key_file
        self.ca_file = ca_file
        self.server_hostname = server_hostname
        self.aead = bool(aead)

    @property
    def tls(self):
        return self.ca_file is not None

    def load_key(self):
        """
        :return: bytes -- a fresh random key, or the 32 bytes of `key_file`
        :raises ValueError: if the key file does not hold exactly 32 bytes
        """
        if self.key_source == 'random':
            return generate_client_key()
        with open(self.key_file, 'rb') as f:
            key = f.read()
        if len(key) != KEY_LEN:
            raise ValueError('key file %s must hold exactly %d bytes' % (self.key_file, KEY_LEN))
        return key


def write_key_file(path, key=None):
    """Write a raw 32-byte key file (random if no key is given) and return the key."""
    key = generate_client_key() if key is None else key
    with open(path, 'wb') as f:
        f.write(key)
    os.chmod(path, 0o600)
    return key
