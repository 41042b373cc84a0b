#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
The two cryptographic layers: AES-256-CBC payload encryption under per-client keys,
and RSA-2048 OAEP(SHA-256) wrapping of client keys for handshake provisioning. Also
the HKDF derivation of the secure-storage key from the (simulated) hardware unique key.
"""

import os

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, padding, serialization
from cryptography.hazmat.primitives.asymmetric import padding as asym_padding
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from mqttz.MqttzErrors import BadPadding, MissingSeed, UnwrapFailed
from mqttz.MqttzProtocol import EncryptedEnvelope, IV_LEN, BLOCK_LEN, WRAPPED_KEY_LEN

KEY_LEN = 32
HUK_SEED_LEN = 32
RSA_BITS = 2048
GCM_TAG_LEN = 16
STORAGE_KDF_INFO = b'mqttz-secure-storage-v1'

_OAEP = asym_padding.OAEP(mgf=asym_padding.MGF1(algorithm=hashes.SHA256()),
                          algorithm=hashes.SHA256(), label=None)


def check_key(key):
    """
    :param bytes key: candidate symmetric key
    :return: bytes -- the key, if exactly 32 bytes
    :raises ValueError: otherwise
    """
    if not isinstance(key, (bytes, bytearray, memoryview)) or len(key) != KEY_LEN:
        raise ValueError('symmetric key must be exactly %d bytes' % KEY_LEN)
    return bytes(key)


def generate_client_key():
    """Fresh random 32-byte AES key."""
    return os.urandom(KEY_LEN)


def _pad(plaintext):
    """PKCS#7 padding into a fresh bytearray the caller wipes."""
    n = len(plaintext)
    pad_len = BLOCK_LEN - n % BLOCK_LEN
    buf = bytearray(n + pad_len)
    buf[:n] = plaintext
    buf[n:] = bytes([pad_len]) * pad_len
    return buf


def encrypt_payload_with_iv(key, iv, plaintext, aead=False):
    """
    Encrypt under a caller-chosen IV. Only for known-answer tests; production code goes
    through `encrypt_payload`, which always draws a fresh IV.

    :param bytes key: 32-byte key
    :param bytes iv: 16-byte IV
    :param bytes plaintext: data of any length
    :param bool aead: use the AES-GCM extension instead of CBC
    :return: EncryptedEnvelope
    """
    key = check_key(key)
    if len(iv) != IV_LEN:
        raise ValueError('IV must be %d bytes' % IV_LEN)
    padded = _pad(plaintext)
    try:
        if aead:
            # padded length + 16 byte tag keeps the ciphertext a multiple of the block size
            ct = AESGCM(key).encrypt(bytes(iv), padded, None)
        else:
            enc = Cipher(algorithms.AES(key), modes.CBC(bytes(iv))).encryptor()
            ct = enc.update(padded) + enc.finalize()
    finally:
        wipe(padded)
    return EncryptedEnvelope(iv=iv, ciphertext=ct)


def encrypt_payload(key, plaintext, aead=False):
    """
    AES-256-CBC with PKCS#7 padding and a fresh random IV per call.

    :param bytes key: 32-byte key
    :param bytes plaintext: data of any length (including empty)
    :param bool aead: off-by-default AES-GCM extension (see module docs)
    :return: EncryptedEnvelope -- ciphertext length is 16 * ceil((len(plaintext) + 1) / 16),
             plus 16 in AEAD mode
    """
    return encrypt_payload_with_iv(key, os.urandom(IV_LEN), plaintext, aead=aead)


def decrypt_payload_buffer(key, env, aead=False):
    """
    Decrypt into a mutable buffer so the caller can zero it after use.

    :param bytes key: 32-byte key
    :param EncryptedEnvelope env: envelope
    :param bool aead: envelope produced in AEAD mode
    :return: bytearray -- plaintext with the padding stripped
    :raises BadPadding: wrong key or corrupted ciphertext
    """
    key = check_key(key)
    if aead:
        try:
            buf = bytearray(AESGCM(key).decrypt(env.iv, env.ciphertext, None))
        except InvalidTag:
            raise BadPadding('AEAD tag mismatch')
    else:
        dec = Cipher(algorithms.AES(key), modes.CBC(env.iv)).decryptor()
        buf = bytearray(len(env.ciphertext) + BLOCK_LEN - 1)
        n = dec.update_into(env.ciphertext, buf)
        rest = dec.finalize()
        buf[n:n + len(rest)] = rest
        del buf[n + len(rest):]
    if not buf or len(buf) % BLOCK_LEN:
        raise BadPadding('plaintext is not block aligned')
    # run the padding check over the final block only
    unpadder = padding.PKCS7(BLOCK_LEN * 8).unpadder()
    try:
        tail = unpadder.update(bytes(buf[-BLOCK_LEN:])) + unpadder.finalize()
    except ValueError:
        buf[:] = bytes(len(buf))
        raise BadPadding('invalid PKCS#7 padding')
    del buf[len(buf) - BLOCK_LEN + len(tail):]
    return buf


def decrypt_payload(key, env, aead=False):
    """
    Inverse of `encrypt_payload`.

    :param bytes key: 32-byte key
    :param EncryptedEnvelope env: envelope (its invariants were checked on construction)
    :param bool aead: envelope produced in AEAD mode
    :return: bytes -- plaintext
    :raises BadPadding: if the last block does not carry valid PKCS#7 padding
    """
    return bytes(decrypt_payload_buffer(key, env, aead=aead))


def wipe(buf):
    """Zero a bytearray in place."""
    if isinstance(buf, bytearray):
        buf[:] = bytes(len(buf))


def generate_broker_keypair():
    """
    :return: RSA-2048 private key (the public half via `.public_key()`)
    """
    return rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS)


def wrap_client_key(pub, key):
    """
    OAEP-SHA-256 encryption of a client key under the broker's public key.

    :param RSAPublicKey pub: broker public key
    :param bytes key: 32-byte client key
    :return: bytes -- 256-byte wrapped key
    """
    return pub.encrypt(check_key(key), _OAEP)


def unwrap_client_key(priv, w):
    """
    Recover a client key. Called only inside the trusted core.

    :param RSAPrivateKey priv: broker private key
    :param bytes w: wrapped key
    :return: bytes -- the 32-byte key
    :raises UnwrapFailed: on OAEP failure or a payload that is not 32 bytes
    """
    if len(w) != WRAPPED_KEY_LEN:
        raise UnwrapFailed('wrapped key must be %d bytes' % WRAPPED_KEY_LEN)
    try:
        key = priv.decrypt(bytes(w), _OAEP)
    except ValueError:
        raise UnwrapFailed('OAEP decryption failed')
    if len(key) != KEY_LEN:
        raise UnwrapFailed('unwrapped key is %d bytes, expected %d' % (len(key), KEY_LEN))
    return key


def derive_storage_key(seed):
    """
    HKDF-SHA-256(ikm=seed, salt=empty, info='mqttz-secure-storage-v1'), 32 bytes.

    :param bytes/NoneType seed: 32-byte HUK seed
    :return: bytes -- storage key
    :raises MissingSeed: if the seed is unset
    """
    if not seed:
        raise MissingSeed('HUK seed is not set')
    if len(seed) != HUK_SEED_LEN:
        raise ValueError('HUK seed must be %d bytes' % HUK_SEED_LEN)
    return hkdf_sha256(bytes(seed), salt=None, info=STORAGE_KDF_INFO, length=KEY_LEN)


def hkdf_sha256(ikm, salt, info, length):
    """Plain HKDF-SHA-256 (RFC 5869); `derive_storage_key` pins its parameters."""
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def public_key_pem(pub):
    return pub.public_bytes(encoding=serialization.Encoding.PEM,
                            format=serialization.PublicFormat.SubjectPublicKeyInfo)


def private_key_der(priv):
    return priv.private_bytes(encoding=serialization.Encoding.DER,
                              format=serialization.PrivateFormat.PKCS8,
                              encryption_algorithm=serialization.NoEncryption())


def load_private_key_der(data):
    return serialization.load_der_private_key(bytes(data), password=None)


def load_public_key(path):
    """
    Load the broker public key exported by `mqttz-broker --export-pubkey`.

    :param string path: PEM file
    """
    with open(path, 'rb') as f:
        return serialization.load_pem_public_key(f.read())


def export_public_key(pub, path):
    with open(path, 'wb') as f:
        f.write(public_key_pem(pub))
