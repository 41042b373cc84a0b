import binascii
import unittest
from unittest import mock

import numpy as np

import generate_data
from mqttz import MqttzCrypto
from mqttz.MqttzCrypto import (check_key, decrypt_payload, decrypt_payload_buffer, derive_storage_key,
                               encrypt_payload, encrypt_payload_with_iv, generate_broker_keypair,
                               generate_client_key, hkdf_sha256, unwrap_client_key, wipe, wrap_client_key)
from mqttz.MqttzErrors import BadPadding, MissingSeed, UnwrapFailed

h = binascii.unhexlify


class MqttzCryptoTestCase(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.keypair = generate_broker_keypair()
        cls.other_keypair = generate_broker_keypair()

    def test_aes256_cbc_known_answer(self):
        """
        CBC-AES256 encryption vectors from NIST SP 800-38A; the 16-byte padding block
        follows the four data blocks.
        """
        key = h('603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4')
        iv = h('000102030405060708090a0b0c0d0e0f')
        plaintext = h('6bc1bee22e409f96e93d7e117393172a'
                      'ae2d8a571e03ac9c9eb76fac45af8e51'
                      '30c81c46a35ce411e5fbc1191a0a52ef'
                      'f69f2445df4f9b17ad2b417be66c3710')
        expected = h('f58c4c04d6e5f1ba779eabfb5f7bfbd6'
                     '9cfc4e967edb808d679f777bc6702c7d'
                     '39f23369a9d9bacfa530e26304231461'
                     'b2eb05e2c39be9fcda6c19078c6a9d1b')
        env = encrypt_payload_with_iv(key, iv, plaintext)
        self.assertEqual(env.iv, iv)
        self.assertEqual(len(env.ciphertext), 80)
        self.assertEqual(env.ciphertext[:64], expected)
        self.assertEqual(decrypt_payload(key, env), plaintext)

    def test_hkdf_rfc5869(self):
        ikm = bytes([0x0b] * 22)
        okm = hkdf_sha256(ikm, salt=h('000102030405060708090a0b0c'), info=h('f0f1f2f3f4f5f6f7f8f9'), length=42)
        self.assertEqual(okm, h('3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf'
                                '34007208d5b887185865'))
        okm = hkdf_sha256(ikm, salt=None, info=b'', length=42)
        self.assertEqual(okm, h('8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d'
                                '9d201395faa4b61a96c8'))

    def test_ciphertext_length(self):
        key = generate_client_key()
        self.assertEqual(len(encrypt_payload(key, b'').ciphertext), 16)
        self.assertEqual(len(encrypt_payload(key, bytes(4096)).ciphertext), 4112)
        for n in range(0, 100):
            env = encrypt_payload(key, bytes(n))
            self.assertEqual(len(env.ciphertext), 16 * ((n + 1 + 15) // 16))
            self.assertEqual(decrypt_payload(key, env), bytes(n))

    def test_round_trip_payloads(self):
        key = generate_client_key()
        for p in generate_data.generate_payloads(200, max_len=2000):
            self.assertEqual(decrypt_payload(key, encrypt_payload(key, p)), p)

    def test_round_trip_sizes(self):
        key = generate_client_key()
        rng = np.random.default_rng(42)
        sizes = np.concatenate([[0, 1, 15, 16, 17, 20479, 20480], rng.integers(0, 20481, size=300)])
        for n in sizes:
            p = rng.bytes(n)
            env = encrypt_payload(key, p)
            self.assertEqual(len(env.ciphertext), 16 * (n // 16 + 1))
            self.assertEqual(decrypt_payload(key, env), p)
            self.assertEqual(bytes(decrypt_payload_buffer(key, env)), p)

    def test_iv_unique(self):
        key = generate_client_key()
        ivs = {encrypt_payload(key, b'same').iv for _ in range(10000)}
        self.assertEqual(len(ivs), 10000)

    def test_wrong_key_bad_padding(self):
        np.random.seed(42)
        key, wrong = generate_client_key(), generate_client_key()
        n, bad = 1000, 0
        for _ in range(n):
            env = encrypt_payload(key, np.random.bytes(np.random.randint(0, 64)))
            try:
                decrypt_payload(wrong, env)
            except BadPadding:
                bad += 1
        print('wrong-key decryptions rejected: %d / %d' % (bad, n))
        self.assertGreaterEqual(bad, 0.98 * n)

    def test_padded_plaintext_wiped(self):
        self.assertEqual(MqttzCrypto._pad(b''), bytearray(b'\x10' * 16))
        self.assertEqual(MqttzCrypto._pad(b'abc'), bytearray(b'abc' + b'\x0d' * 13))
        key = generate_client_key()
        for aead in (False, True):
            wiped = []

            def record(buf):
                wiped.append(buf)
                wipe(buf)

            with mock.patch('mqttz.MqttzCrypto.wipe', side_effect=record):
                env = encrypt_payload(key, bytearray(b'heart rate 72'), aead=aead)
            self.assertEqual(len(wiped), 1)
            self.assertIsInstance(wiped[0], bytearray)
            self.assertEqual(bytes(wiped[0]), bytes(16))
            self.assertEqual(decrypt_payload(key, env, aead=aead), b'heart rate 72')

    def test_buffer_and_wipe(self):
        key = generate_client_key()
        buf = decrypt_payload_buffer(key, encrypt_payload(key, b'secret reading'))
        self.assertIsInstance(buf, bytearray)
        self.assertEqual(bytes(buf), b'secret reading')
        wipe(buf)
        self.assertEqual(bytes(buf), bytes(14))

    def test_wrap_unwrap(self):
        pub = self.keypair.public_key()
        for _ in range(100):
            key = generate_client_key()
            w = wrap_client_key(pub, key)
            self.assertEqual(len(w), 256)
            self.assertEqual(unwrap_client_key(self.keypair, w), key)
        # OAEP is randomized
        key = generate_client_key()
        self.assertNotEqual(wrap_client_key(pub, key), wrap_client_key(pub, key))

    def test_unwrap_failures(self):
        key = generate_client_key()
        w = wrap_client_key(self.keypair.public_key(), key)
        with self.assertRaises(UnwrapFailed):
            unwrap_client_key(self.other_keypair, w)
        flipped = bytearray(w)
        flipped[100] ^= 0x01
        with self.assertRaises(UnwrapFailed):
            unwrap_client_key(self.keypair, bytes(flipped))
        with self.assertRaises(UnwrapFailed):
            unwrap_client_key(self.keypair, w[:255])
        # a well-formed wrap of something that is not a 32-byte key
        from mqttz.MqttzCrypto import _OAEP
        short = self.keypair.public_key().encrypt(bytes(16), _OAEP)
        with self.assertRaises(UnwrapFailed):
            unwrap_client_key(self.keypair, short)
        with self.assertRaises(ValueError):
            wrap_client_key(self.keypair.public_key(), bytes(31))

    def test_derive_storage_key(self):
        seed = bytes(range(32))
        k = derive_storage_key(seed)
        self.assertEqual(len(k), 32)
        self.assertEqual(derive_storage_key(seed), k)
        outputs = {k}
        for bit in range(256):
            flipped = bytearray(seed)
            flipped[bit // 8] ^= 1 << (bit % 8)
            outputs.add(derive_storage_key(bytes(flipped)))
        self.assertEqual(len(outputs), 257)
        with self.assertRaises(MissingSeed):
            derive_storage_key(None)
        with self.assertRaises(MissingSeed):
            derive_storage_key(b'')
        with self.assertRaises(ValueError):
            derive_storage_key(bytes(16))

    def test_aead_extension(self):
        key, wrong = generate_client_key(), generate_client_key()
        for p in generate_data.generate_payloads(50):
            env = encrypt_payload(key, p, aead=True)
            self.assertEqual(len(env.ciphertext), 16 * ((len(p) + 16) // 16) + 16)
            self.assertEqual(len(env.ciphertext) % 16, 0)
            self.assertEqual(decrypt_payload(key, env, aead=True), p)
            with self.assertRaises(BadPadding):
                decrypt_payload(wrong, env, aead=True)
        env = encrypt_payload(key, b'reading', aead=True)
        tampered = bytearray(env.ciphertext)
        tampered[0] ^= 0x80
        with self.assertRaises(BadPadding):
            decrypt_payload(key, type(env)(iv=env.iv, ciphertext=bytes(tampered)), aead=True)

    def test_check_key(self):
        self.assertEqual(check_key(bytearray(32)), bytes(32))
        for bad in (bytes(16), bytes(33), 'x' * 32, None):
            with self.assertRaises(ValueError):
                check_key(bad)
