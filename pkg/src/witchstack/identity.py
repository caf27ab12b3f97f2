"""Long-term device identities and their provisioning files.

Each device holds four private keys plus the peer's matching publics:

    class C signing key   ECDSA P-256   tunnel handshake authentication
    class D signing key   ECDSA P-256   tunnel handshake authentication
    key-transport key     RSA-1280      per-message envelope encryption
    envelope signing key  ECDSA P-384   per-message envelope signature

Identities are provisioned as a JSON file with PEM-encoded keys:

    {"format": "witchstack-identity", "version": 1, "role": "phone", ...}

Generation is deterministic under a seeded RandomSource so paired runs
reproduce byte-identical wire traffic: EC private scalars are derived from
the stream, and RSA primes come from a seeded search (the key itself is
still validated by the crypto library on construction).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec, rsa

from .rng import RandomSource

__all__ = [
    "BadIdentityFile",
    "DeviceIdentity",
    "generate_identity_pair",
    "load_identity",
    "save_identity",
]

FORMAT_NAME = "witchstack-identity"
FORMAT_VERSION = 1
RSA_BITS = 1280


class BadIdentityFile(Exception):
    pass


@dataclass
class DeviceIdentity:
    role: str                    # "phone" or "watch"
    device_name: str
    build_version: str
    class_c_key: ec.EllipticCurvePrivateKey
    class_d_key: ec.EllipticCurvePrivateKey
    transport_key: rsa.RSAPrivateKey
    envelope_key: ec.EllipticCurvePrivateKey
    peer_class_c: ec.EllipticCurvePublicKey
    peer_class_d: ec.EllipticCurvePublicKey
    peer_transport: rsa.RSAPublicKey
    peer_envelope: ec.EllipticCurvePublicKey

    def signing_key(self, traffic_class: str) -> ec.EllipticCurvePrivateKey:
        return self.class_c_key if traffic_class == "C" else self.class_d_key

    def peer_verify_key(self, traffic_class: str) -> ec.EllipticCurvePublicKey:
        return self.peer_class_c if traffic_class == "C" else self.peer_class_d


# --- deterministic key material ---------------------------------------------

def _derive_ec_key(rng: RandomSource, curve: ec.EllipticCurve) -> ec.EllipticCurvePrivateKey:
    # uniform-enough for an emulator; scalar must land in [1, order-1]
    scalar = int.from_bytes(rng.bytes(curve.key_size // 8 + 8), "big") % (curve.group_order - 1) + 1
    return ec.derive_private_key(scalar, curve)


_SMALL_PRIMES = [p for p in range(3, 1000)
                 if all(p % q for q in range(2, int(math.isqrt(p)) + 1))]


def _is_probable_prime(n: int, rng: RandomSource, rounds: int = 40) -> bool:
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d, r = d // 2, r + 1
    for _ in range(rounds):
        a = int.from_bytes(rng.bytes(64), "big") % (n - 3) + 2
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _seeded_prime(rng: RandomSource, bits: int) -> int:
    while True:
        cand = int.from_bytes(rng.bytes(bits // 8), "big")
        cand |= (3 << (bits - 2)) | 1  # top two bits force an exact modulus width
        if _is_probable_prime(cand, rng):
            return cand


def _generate_rsa(rng: RandomSource, bits: int = RSA_BITS) -> rsa.RSAPrivateKey:
    e = 65537
    while True:
        p = _seeded_prime(rng, bits // 2)
        q = _seeded_prime(rng, bits // 2)
        if p == q:
            continue
        if p < q:
            p, q = q, p
        phi = (p - 1) * (q - 1)
        if math.gcd(e, phi) != 1:
            continue
        d = pow(e, -1, phi)
        numbers = rsa.RSAPrivateNumbers(
            p=p, q=q, d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(e, p * q),
        )
        return numbers.private_key()


@dataclass
class _HalfIdentity:
    class_c: ec.EllipticCurvePrivateKey
    class_d: ec.EllipticCurvePrivateKey
    transport: rsa.RSAPrivateKey
    envelope: ec.EllipticCurvePrivateKey


def _generate_half(rng: RandomSource) -> _HalfIdentity:
    return _HalfIdentity(
        class_c=_derive_ec_key(rng, ec.SECP256R1()),
        class_d=_derive_ec_key(rng, ec.SECP256R1()),
        transport=_generate_rsa(rng),
        envelope=_derive_ec_key(rng, ec.SECP384R1()),
    )


def generate_identity_pair(
    rng: RandomSource | None = None,
    phone_name: str = "Phone",
    watch_name: str = "Watch",
    build_version: str = "19R570",
) -> tuple[DeviceIdentity, DeviceIdentity]:
    """Mint a phone/watch identity pair with cross-wired peer publics."""
    rng = rng or RandomSource()
    phone_half = _generate_half(rng.child("phone"))
    watch_half = _generate_half(rng.child("watch"))

    def build(role: str, name: str, mine: _HalfIdentity, theirs: _HalfIdentity) -> DeviceIdentity:
        return DeviceIdentity(
            role=role, device_name=name, build_version=build_version,
            class_c_key=mine.class_c, class_d_key=mine.class_d,
            transport_key=mine.transport, envelope_key=mine.envelope,
            peer_class_c=theirs.class_c.public_key(),
            peer_class_d=theirs.class_d.public_key(),
            peer_transport=theirs.transport.public_key(),
            peer_envelope=theirs.envelope.public_key(),
        )

    return (build("phone", phone_name, phone_half, watch_half),
            build("watch", watch_name, watch_half, phone_half))


# --- file format -------------------------------------------------------------

def _private_pem(key) -> str:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ).decode("ascii")


def _public_pem(key) -> str:
    return key.public_bytes(
        serialization.Encoding.PEM,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    ).decode("ascii")


def save_identity(identity: DeviceIdentity, path: str) -> None:
    record = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "role": identity.role,
        "device_name": identity.device_name,
        "build_version": identity.build_version,
        "keys": {
            "class_c": _private_pem(identity.class_c_key),
            "class_d": _private_pem(identity.class_d_key),
            "transport": _private_pem(identity.transport_key),
            "envelope": _private_pem(identity.envelope_key),
        },
        "peer": {
            "class_c": _public_pem(identity.peer_class_c),
            "class_d": _public_pem(identity.peer_class_d),
            "transport": _public_pem(identity.peer_transport),
            "envelope": _public_pem(identity.peer_envelope),
        },
    }
    with open(path, "w", encoding="ascii") as handle:
        json.dump(record, handle, indent=2)
        handle.write("\n")


def _load_private(pem: str, want_type, label: str):
    try:
        key = serialization.load_pem_private_key(pem.encode("ascii"), password=None)
    except (ValueError, TypeError) as exc:
        raise BadIdentityFile("bad %s key: %s" % (label, exc)) from exc
    if not isinstance(key, want_type):
        raise BadIdentityFile("%s key has wrong type %s" % (label, type(key).__name__))
    return key


def _load_public(pem: str, want_type, label: str):
    try:
        key = serialization.load_pem_public_key(pem.encode("ascii"))
    except (ValueError, TypeError) as exc:
        raise BadIdentityFile("bad %s key: %s" % (label, exc)) from exc
    if not isinstance(key, want_type):
        raise BadIdentityFile("%s key has wrong type %s" % (label, type(key).__name__))
    return key


def load_identity(path: str) -> DeviceIdentity:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            record = json.load(handle)
    except OSError as exc:
        raise BadIdentityFile("cannot read %s: %s" % (path, exc)) from exc
    except json.JSONDecodeError as exc:
        raise BadIdentityFile("cannot parse %s: %s" % (path, exc)) from exc
    if not isinstance(record, dict) or record.get("format") != FORMAT_NAME:
        raise BadIdentityFile("%s is not an identity file" % path)
    if record.get("version") != FORMAT_VERSION:
        raise BadIdentityFile("unsupported identity version %r" % record.get("version"))
    try:
        keys, peer = record["keys"], record["peer"]
        identity = DeviceIdentity(
            role=record["role"],
            device_name=record["device_name"],
            build_version=record["build_version"],
            class_c_key=_load_private(keys["class_c"], ec.EllipticCurvePrivateKey, "class_c"),
            class_d_key=_load_private(keys["class_d"], ec.EllipticCurvePrivateKey, "class_d"),
            transport_key=_load_private(keys["transport"], rsa.RSAPrivateKey, "transport"),
            envelope_key=_load_private(keys["envelope"], ec.EllipticCurvePrivateKey, "envelope"),
            peer_class_c=_load_public(peer["class_c"], ec.EllipticCurvePublicKey, "peer class_c"),
            peer_class_d=_load_public(peer["class_d"], ec.EllipticCurvePublicKey, "peer class_d"),
            peer_transport=_load_public(peer["transport"], rsa.RSAPublicKey, "peer transport"),
            peer_envelope=_load_public(peer["envelope"], ec.EllipticCurvePublicKey, "peer envelope"),
        )
    except KeyError as exc:
        raise BadIdentityFile("missing field %s" % exc) from exc
    if identity.transport_key.key_size != RSA_BITS:
        raise BadIdentityFile("transport key must be %d-bit RSA" % RSA_BITS)
    return identity
