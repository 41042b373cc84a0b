"""
TLS plumbing for broker authentication: a development CA plus server certificate, and
`ssl.SSLContext` builders for both ends (TLS 1.2 or newer).
"""

import argparse
import datetime
import ipaddress
import os
import ssl

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

CA_CERT = 'ca.pem'
SERVER_CERT = 'server.pem'
SERVER_KEY = 'server.key'


def _name(common_name):
    return x509.Name([x509.NameAttribute(NameOID.ORGANIZATION_NAME, 'mqttz dev'),
                      x509.NameAttribute(NameOID.COMMON_NAME, common_name)])


def _write_pem(path, data, private=False):
    with open(path, 'wb') as f:
        f.write(data)
    if private:
        os.chmod(path, 0o600)


def make_dev_ca(out_dir, hostname='localhost', days=365):
    """
    Create a self-signed development CA and a server certificate for `hostname`
    (plus 127.0.0.1) signed by it.

    :param string out_dir: output directory, created if missing
    :param string hostname: DNS name clients will verify
    :param int days: validity
    :return: dict with 'ca_cert', 'server_cert' and 'server_key' paths
    """
    os.makedirs(out_dir, exist_ok=True)
    now = datetime.datetime.now(datetime.timezone.utc)
    not_before = now - datetime.timedelta(minutes=5)
    not_after = now + datetime.timedelta(days=days)

    ca_key = ec.generate_private_key(ec.SECP256R1())
    ca_name = _name('mqttz dev CA')
    ca_cert = (
        x509.CertificateBuilder()
        .subject_name(ca_name)
        .issuer_name(ca_name)
        .public_key(ca_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(x509.KeyUsage(digital_signature=True, content_commitment=False, key_encipherment=False,
                                     data_encipherment=False, key_agreement=False, key_cert_sign=True,
                                     crl_sign=True, encipher_only=False, decipher_only=False), critical=True)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(ca_key.public_key()), critical=False)
        .sign(ca_key, hashes.SHA256())
    )

    server_key = ec.generate_private_key(ec.SECP256R1())
    san = [x509.DNSName(hostname), x509.IPAddress(ipaddress.ip_address('127.0.0.1'))]
    server_cert = (
        x509.CertificateBuilder()
        .subject_name(_name(hostname))
        .issuer_name(ca_name)
        .public_key(server_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(x509.SubjectAlternativeName(san), critical=False)
        .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
        .add_extension(x509.AuthorityKeyIdentifier.from_issuer_public_key(ca_key.public_key()), critical=False)
        .sign(ca_key, hashes.SHA256())
    )

    paths = {'ca_cert': os.path.join(out_dir, CA_CERT),
             'server_cert': os.path.join(out_dir, SERVER_CERT),
             'server_key': os.path.join(out_dir, SERVER_KEY)}
    _write_pem(paths['ca_cert'], ca_cert.public_bytes(serialization.Encoding.PEM))
    _write_pem(paths['server_cert'], server_cert.public_bytes(serialization.Encoding.PEM))
    _write_pem(paths['server_key'],
               server_key.private_bytes(encoding=serialization.Encoding.PEM,
                                        format=serialization.PrivateFormat.PKCS8,
                                        encryption_algorithm=serialization.NoEncryption()),
               private=True)
    return paths


def server_ssl_context(cert, key):
    """
    :param string cert: server certificate chain (PEM)
    :param string key: server private key (PEM)
    :return: ssl.SSLContext
    :raises ssl.SSLError/OSError: if the material does not load
    """
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(certfile=cert, keyfile=key)
    return ctx


def client_ssl_context(ca_file):
    """
    Verifying client context: the broker certificate must chain to `ca_file` and match
    the server hostname.
    """
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.check_hostname = True
    ctx.verify_mode = ssl.CERT_REQUIRED
    ctx.load_verify_locations(cafile=ca_file)
    return ctx


def main(argv=None):
    parser = argparse.ArgumentParser(prog='mqttz-devcert',
                                     description='Create a development CA and broker certificate.')
    parser.add_argument('--out', default='certs', help='output directory')
    parser.add_argument('--hostname', default='localhost', help='broker DNS name')
    parser.add_argument('--days', type=int, default=365, help='validity in days')
    args = parser.parse_args(argv)
    paths = make_dev_ca(args.out, hostname=args.hostname, days=args.days)
    for name in ('ca_cert', 'server_cert', 'server_key'):
        print('%-12s %s' % (name, paths[name]))
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
