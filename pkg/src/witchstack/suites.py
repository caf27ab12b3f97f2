"""Cipher suite preference lists and negotiation.

Algorithm identifiers reuse the IANA IKEv2 registry numbers. Two built-in
device profiles mirror the preference orders advertised by a Series 5 and a
Series 9 watch; negotiation picks, per algorithm category, the first entry
of the initiator's list that the responder also supports.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "Profile",
    "ChosenSuite",
    "NoCommonSuite",
    "SERIES_5",
    "SERIES_9",
    "PROFILES",
    "negotiate_alg",
    "negotiate",
    "ENCR_AES_GCM_16",
    "ENCR_CHACHA20_POLY1305",
    "PRF_HMAC_SHA2_256",
    "PRF_HMAC_SHA2_512",
    "DH_MODP_8192",
    "DH_ECP_521",
    "DH_CURVE25519",
    "DH_CURVE448",
    "SIGHASH_SHA2_256",
    "SIGHASH_IDENTITY",
    "ALG_NAMES",
]

# encryption transforms
ENCR_AES_GCM_16 = 20
ENCR_CHACHA20_POLY1305 = 28

# pseudo-random functions
PRF_HMAC_SHA2_256 = 5
PRF_HMAC_SHA2_512 = 7

# Diffie-Hellman groups
DH_MODP_8192 = 18
DH_ECP_521 = 21
DH_CURVE25519 = 31
DH_CURVE448 = 32

# signature hash algorithms
SIGHASH_SHA2_256 = 2
SIGHASH_IDENTITY = 5

ALG_NAMES = {
    ("encr", ENCR_AES_GCM_16): "AES-GCM-16 (256bit)",
    ("encr", ENCR_CHACHA20_POLY1305): "ChaCha20-Poly1305",
    ("prf", PRF_HMAC_SHA2_256): "HMAC-SHA2-256",
    ("prf", PRF_HMAC_SHA2_512): "HMAC-SHA2-512",
    ("dh", DH_MODP_8192): "8192-bit MODP Group",
    ("dh", DH_ECP_521): "521-bit random ECP group",
    ("dh", DH_CURVE25519): "Curve25519",
    ("dh", DH_CURVE448): "Curve448",
    ("sighash", SIGHASH_SHA2_256): "SHA2-256",
    ("sighash", SIGHASH_IDENTITY): "Identity",
}


class NoCommonSuite(Exception):
    """Preference lists share no algorithm in some category."""


@dataclass(frozen=True)
class Profile:
    """Per-device algorithm preference lists, most preferred first."""

    name: str
    encryption: tuple[int, ...]
    prf: tuple[int, ...]
    dh: tuple[int, ...]
    signature_hash: tuple[int, ...]


@dataclass(frozen=True)
class ChosenSuite:
    encryption: int
    prf: int
    dh: int
    signature_hash: int


SERIES_5 = Profile(
    name="series5",
    encryption=(ENCR_CHACHA20_POLY1305, ENCR_AES_GCM_16),
    prf=(PRF_HMAC_SHA2_512, PRF_HMAC_SHA2_256),
    dh=(DH_CURVE25519, DH_ECP_521, DH_MODP_8192),
    signature_hash=(SIGHASH_SHA2_256, SIGHASH_IDENTITY),
)

SERIES_9 = Profile(
    name="series9",
    encryption=(ENCR_AES_GCM_16, ENCR_CHACHA20_POLY1305),
    prf=(PRF_HMAC_SHA2_512,),
    dh=(DH_CURVE448, DH_CURVE25519),
    signature_hash=(SIGHASH_IDENTITY, SIGHASH_SHA2_256),
)

PROFILES = {"series5": SERIES_5, "series9": SERIES_9}


def negotiate_alg(initiator: tuple[int, ...], responder: tuple[int, ...]) -> int:
    """First entry of the initiator's list the responder also supports."""
    for alg in initiator:
        if alg in responder:
            return alg
    raise NoCommonSuite("no overlap between %r and %r" % (initiator, responder))


def negotiate(initiator: Profile, responder: Profile) -> ChosenSuite:
    return ChosenSuite(
        encryption=negotiate_alg(initiator.encryption, responder.encryption),
        prf=negotiate_alg(initiator.prf, responder.prf),
        dh=negotiate_alg(initiator.dh, responder.dh),
        signature_hash=negotiate_alg(initiator.signature_hash, responder.signature_hash),
    )
