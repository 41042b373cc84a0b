import asyncio
import os
import shutil
import tempfile
from functools import wraps
from time import time

from mqttz.MqttzBroker import BrokerThread
from mqttz.MqttzConfig import BrokerConfig, ClientConfig
from mqttz.MqttzCrypto import HUK_SEED_LEN
from mqttz.MqttzTls import make_dev_ca


def timeit(func):
    @wraps(func)
    def _time_it(*args, **kwargs):
        start = time()
        try:
            return func(*args, **kwargs)
        finally:
            end_ = time() - start
            print('Total execution time: %0.5g s' % (end_))
    return _time_it


def run(coro, timeout=120):
    """Run a coroutine on a fresh event loop, failing if it takes longer than `timeout` s."""
    return asyncio.run(asyncio.wait_for(coro, timeout))


async def wait_until(predicate, timeout=5.0, interval=0.01):
    """Poll `predicate()` until it is true; returns its final value."""
    deadline = asyncio.get_running_loop().time() + timeout
    while not predicate():
        if asyncio.get_running_loop().time() > deadline:
            return predicate()
        await asyncio.sleep(interval)
    return True


class BrokerFixture(object):
    """
    Throwaway broker for a test: temp directory with dev certificates, ACL file, secure
    store and exported public key, plus a `BrokerThread` serving on a free port.

    :var string root: temp directory
    :var bytes seed: HUK seed, kept so the broker can be restarted on the same store
    :var mqttz.BrokerConfig config: broker settings
    """

    def __init__(self, acl_text='', mode='tee', tls=True, capacity=64, dispatch_tap=None, aead=False,
                 world_switch_us=0.0):
        self.root = tempfile.mkdtemp(prefix='mqttz-test-')
        self.acl_path = os.path.join(self.root, 'acl.conf')
        self.write_acl(acl_text)
        self.seed = os.urandom(HUK_SEED_LEN)
        self.certs = make_dev_ca(os.path.join(self.root, 'certs')) if tls else None
        self.pubkey_path = os.path.join(self.root, 'broker_pub.pem')
        self.store_dir = os.path.join(self.root, 'store')
        self.dispatch_tap = dispatch_tap
        self.aead = aead
        self.config = BrokerConfig(listen='127.0.0.1:0',
                                   cert=self.certs['server_cert'] if tls else None,
                                   key=self.certs['server_key'] if tls else None,
                                   acl=self.acl_path, store_dir=self.store_dir, cache_capacity=capacity,
                                   export_pubkey=self.pubkey_path, mode=mode, huk_seed=self.seed, aead=aead,
                                   world_switch_us=world_switch_us)
        self.thread = None

    def start(self):
        self.thread = BrokerThread(self.config, dispatch_tap=self.dispatch_tap).start()
        return self

    def stop(self):
        if self.thread is not None:
            self.thread.stop()
            self.thread = None

    def restart(self):
        self.stop()
        return self.start()

    @property
    def broker(self):
        return self.thread.broker

    @property
    def port(self):
        return self.thread.port

    def write_acl(self, text):
        with open(self.acl_path, 'w') as f:
            f.write(text)

    def client_config(self, client_id, **kwargs):
        if 'broker' not in kwargs:
            kwargs['broker'] = '127.0.0.1:%d' % self.port
        if 'public_key' not in kwargs:
            kwargs.setdefault('pubkey_path', self.pubkey_path)
        kwargs.setdefault('ca_file', self.certs['ca_cert'] if self.certs else None)
        kwargs.setdefault('aead', self.aead)
        return ClientConfig(client_id, **kwargs)

    def close(self):
        self.stop()
        shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()
