import hashlib
import os

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from mqttz.MqttzCrypto import check_key, KEY_LEN, GCM_TAG_LEN
from mqttz.MqttzErrors import RecordNotFound, StoreIOError, UnsealFailed

NONCE_LEN = 12
RECORD_SUFFIX = '.sealed'


class SecureStore(object):
    """
    Sealed persistent key storage, the stand-in for the TEE secure storage API.

    One file per client, ``<directory>/<hex(SHA-256(client_id))>.sealed``, holding
    ``nonce (12) | AES-256-GCM ciphertext | tag (16)`` with the client id as associated
    data. Raw key bytes never reach the disk.

    :var string directory: store directory
    :var int reads: number of unseal attempts that touched the disk
    :var int writes: number of records written
    """

    def __init__(self, directory, storage_key):
        """
        :param string directory: store directory, created if missing
        :param bytes storage_key: 32-byte key from `derive_storage_key`
        :raises StoreIOError: if the directory cannot be created
        """
        self.directory = directory
        self._aead = AESGCM(check_key(storage_key))
        self.reads = 0
        self.writes = 0
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as e:
            raise StoreIOError('cannot create store directory %s: %s' % (directory, e))

    def record_path(self, client_id):
        name = hashlib.sha256(client_id.encode('utf-8')).hexdigest()
        return os.path.join(self.directory, name + RECORD_SUFFIX)

    def contains(self, client_id):
        return os.path.exists(self.record_path(client_id))

    def seal_blob(self, path, data, associated_data):
        """
        Seal arbitrary bytes to `path`, replacing it atomically.

        :raises StoreIOError: on any filesystem failure (the previous record is kept)
        """
        nonce = os.urandom(NONCE_LEN)
        record = nonce + self._aead.encrypt(nonce, bytes(data), associated_data)
        tmp = path + '.tmp'
        try:
            with open(tmp, 'wb') as f:
                f.write(record)
            os.replace(tmp, path)
        except OSError as e:
            raise StoreIOError('cannot write sealed record %s: %s' % (path, e))
        self.writes += 1

    def unseal_blob(self, path, associated_data, label):
        """
        :raises RecordNotFound: no record at `path`
        :raises UnsealFailed: record present but nonce/ciphertext/tag/AD do not authenticate
        :raises StoreIOError: unreadable record
        """
        self.reads += 1
        try:
            with open(path, 'rb') as f:
                record = f.read()
        except FileNotFoundError:
            raise RecordNotFound('no sealed record for %r' % label)
        except OSError as e:
            raise StoreIOError('cannot read sealed record %s: %s' % (path, e))
        if len(record) < NONCE_LEN + GCM_TAG_LEN:
            raise UnsealFailed(label, 'sealed record for %r is truncated' % label)
        try:
            return self._aead.decrypt(record[:NONCE_LEN], record[NONCE_LEN:], associated_data)
        except InvalidTag:
            raise UnsealFailed(label, 'sealed record for %r failed authentication' % label)

    def store_seal(self, client_id, key):
        """
        Seal one client key.

        :param string client_id: owner, bound in as associated data
        :param bytes key: 32-byte key
        :raises StoreIOError: on write failure
        """
        self.seal_blob(self.record_path(client_id), check_key(key), client_id.encode('utf-8'))

    def store_unseal(self, client_id):
        """
        Read back and authenticate one client key.

        :param string client_id: owner
        :return: bytes -- 32-byte key
        :raises RecordNotFound: if there is no record
        :raises UnsealFailed: on any ciphertext, tag or associated-data mismatch
        """
        key = self.unseal_blob(self.record_path(client_id), client_id.encode('utf-8'), client_id)
        if len(key) != KEY_LEN:
            raise UnsealFailed(client_id, 'sealed record for %r has a bad key length' % client_id)
        return key

    def remove(self, client_id):
        try:
            os.remove(self.record_path(client_id))
        except FileNotFoundError:
            pass
