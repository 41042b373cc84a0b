import os
import ssl
import tempfile
import unittest

from cryptography import x509

from mqttz.MqttzTls import client_ssl_context, main, make_dev_ca, server_ssl_context


class MqttzTlsTestCase(unittest.TestCase):

    def test_dev_ca(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = make_dev_ca(os.path.join(tmp, 'certs'), hostname='broker.local')
            for p in paths.values():
                self.assertTrue(os.path.exists(p))
            with open(paths['server_cert'], 'rb') as f:
                cert = x509.load_pem_x509_certificate(f.read())
            san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
            self.assertEqual(san.get_values_for_type(x509.DNSName), ['broker.local'])
            self.assertEqual([str(ip) for ip in san.get_values_for_type(x509.IPAddress)], ['127.0.0.1'])
            self.assertEqual(os.stat(paths['server_key']).st_mode & 0o777, 0o600)

            server = server_ssl_context(paths['server_cert'], paths['server_key'])
            client = client_ssl_context(paths['ca_cert'])
            self.assertEqual(server.minimum_version, ssl.TLSVersion.TLSv1_2)
            self.assertEqual(client.verify_mode, ssl.CERT_REQUIRED)
            self.assertTrue(client.check_hostname)

    def test_cli(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, 'certs')
            self.assertEqual(main(['--out', out, '--hostname', 'localhost', '--days', '2']), 0)
            self.assertEqual(sorted(os.listdir(out)), ['ca.pem', 'server.key', 'server.pem'])
