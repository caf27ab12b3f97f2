"""Per-message payload protection: key encapsulation plus payload cipher.

Each message gets fresh 128-bit keys k1, k2 and travels as two fields:

    sed = AES-CBC(k2, IV=0, PKCS#7(plaintext))          faithful mode
          AES-GCM(k2, nonce=0, plaintext)               mitigated mode
    c1  = AES-CTR(k1, counter=0) over k2
    c2  = RSA-OAEP-SHA256(peer transport public, k1 ‖ c1)
    s   = ECDSA-P384-SHA256(local envelope key, c2)
    ekd = version(1)=0x01 ‖ len(c2)(2 BE) ‖ c2 ‖ len(s)(2 BE) ‖ s

and the envelope is a keyed record of length-prefixed entries:

    +---------+--------+-------+---------+--------+-------+
    | "ekd"   | length | value | "sed"   | length | value |
    | 3 B tag | 4 B BE | ...   | 3 B tag | 4 B BE | ...   |
    +---------+--------+-------+---------+--------+-------+

The signature covers only c2, so in faithful mode the payload bytes are
completely unauthenticated: flipping bits in sed block i garbles that
block and XORs the same difference into block i+1 on decryption.  That
malleability is preserved here on purpose, with forge_sample_type as the
attacker's tool.  Mitigated mode swaps the CBC payload for AES-GCM under
the same encapsulated k2, and any such tamper fails the tag instead.

The public decrypt entry point reports every failure as the same
DecryptFailed, so callers cannot be turned into a padding oracle; the
detailed reasons stay available to tests via _decrypt_detailed.

RSA keys are 1280-bit; zero IVs and counters are safe because k1 and k2
are single-use.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, padding as sym_padding
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .identity import RSA_BITS, DeviceIdentity
from .rng import RandomSource

__all__ = [
    "AovercEnvelope",
    "AovercError",
    "AovercKeyring",
    "BlockOutOfRange",
    "DecryptFailed",
    "EKD_VERSION",
    "FAITHFUL",
    "AEAD_MITIGATED",
    "OaepDecodeFailure",
    "PaddingInvalid",
    "PlaintextTooLarge",
    "SignatureInvalid",
    "TagInvalid",
    "aoverc_decrypt",
    "aoverc_encrypt",
    "decode_envelope",
    "encode_envelope",
    "forge_sample_type",
    "keyring_from_identity",
]

FAITHFUL = "faithful"
AEAD_MITIGATED = "aead_mitigated"

EKD_VERSION = 0x01
_HASH_LEN = 32                      # SHA-256 for OAEP and the signature
_KEY_LEN = 16                       # k1, k2 are 128-bit
_ZERO_IV = bytes(16)
_ZERO_NONCE = bytes(12)


class AovercError(Exception):
    pass


class DecryptFailed(AovercError):
    """The uniform public failure; never says why."""


class SignatureInvalid(AovercError):
    pass


class OaepDecodeFailure(AovercError):
    pass


class PaddingInvalid(AovercError):
    pass


class TagInvalid(AovercError):
    pass


class PlaintextTooLarge(AovercError):
    pass


class BlockOutOfRange(AovercError):
    pass


class MalformedEnvelope(AovercError):
    pass


@dataclass(frozen=True)
class AovercKeyring:
    local_decrypt: rsa.RSAPrivateKey        # our transport key (1280-bit)
    local_sign: ec.EllipticCurvePrivateKey  # our envelope key (P-384)
    peer_encrypt: rsa.RSAPublicKey          # peer transport public
    peer_verify: ec.EllipticCurvePublicKey  # peer envelope public

    def __post_init__(self):
        if self.local_decrypt.key_size != RSA_BITS:
            raise AovercError("local RSA key is %d bits, need %d"
                              % (self.local_decrypt.key_size, RSA_BITS))
        if self.peer_encrypt.key_size != RSA_BITS:
            raise AovercError("peer RSA key is %d bits, need %d"
                              % (self.peer_encrypt.key_size, RSA_BITS))
        for key, label in ((self.local_sign, "local signing"),
                           (self.peer_verify, "peer verify")):
            if key.curve.name != "secp384r1":
                raise AovercError("%s key is %s, need P-384" % (label, key.curve.name))


def keyring_from_identity(identity: DeviceIdentity) -> AovercKeyring:
    return AovercKeyring(local_decrypt=identity.transport_key,
                         local_sign=identity.envelope_key,
                         peer_encrypt=identity.peer_transport,
                         peer_verify=identity.peer_envelope)


@dataclass(frozen=True)
class AovercEnvelope:
    ekd: bytes
    sed: bytes

    def split_ekd(self) -> tuple[int, bytes, bytes]:
        """(version, c2, signature) from the encoded ekd field."""
        if len(self.ekd) < 3:
            raise MalformedEnvelope("ekd shorter than its header")
        version = self.ekd[0]
        (c2_len,) = struct.unpack_from(">H", self.ekd, 1)
        offset = 3 + c2_len
        if len(self.ekd) < offset + 2:
            raise MalformedEnvelope("ekd truncated inside c2")
        c2 = self.ekd[3:offset]
        (sig_len,) = struct.unpack_from(">H", self.ekd, offset)
        offset += 2
        if len(self.ekd) != offset + sig_len:
            raise MalformedEnvelope("ekd length fields disagree with size")
        return version, c2, self.ekd[offset:]


def _build_ekd(c2: bytes, signature: bytes) -> bytes:
    return (bytes([EKD_VERSION]) + struct.pack(">H", len(c2)) + c2
            + struct.pack(">H", len(signature)) + signature)


def encode_envelope(envelope: AovercEnvelope) -> bytes:
    out = b""
    for tag, value in ((b"ekd", envelope.ekd), (b"sed", envelope.sed)):
        out += tag + struct.pack(">I", len(value)) + value
    return out


def decode_envelope(data: bytes) -> AovercEnvelope:
    fields = {}
    offset = 0
    while offset < len(data):
        if offset + 7 > len(data):
            raise MalformedEnvelope("truncated entry header")
        tag = data[offset:offset + 3]
        (length,) = struct.unpack_from(">I", data, offset + 3)
        offset += 7
        if offset + length > len(data):
            raise MalformedEnvelope("entry overruns record")
        fields[tag] = bytes(data[offset:offset + length])
        offset += length
    if b"ekd" not in fields or b"sed" not in fields:
        raise MalformedEnvelope("record missing ekd or sed")
    return AovercEnvelope(fields[b"ekd"], fields[b"sed"])


# --- OAEP, encoded by hand so the seed can come from a seeded source -------------

def _mgf1(seed: bytes, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(seed + struct.pack(">I", counter)).digest()
        counter += 1
    return out[:length]


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _oaep_encrypt(public: rsa.RSAPublicKey, message: bytes, seed: bytes) -> bytes:
    k = (public.key_size + 7) // 8
    if len(message) > k - 2 * _HASH_LEN - 2:
        raise PlaintextTooLarge("%d bytes exceeds OAEP capacity %d"
                                % (len(message), k - 2 * _HASH_LEN - 2))
    l_hash = hashlib.sha256(b"").digest()
    ps = bytes(k - len(message) - 2 * _HASH_LEN - 2)
    db = l_hash + ps + b"\x01" + message
    masked_db = _xor(db, _mgf1(seed, k - _HASH_LEN - 1))
    masked_seed = _xor(seed, _mgf1(masked_db, _HASH_LEN))
    em = b"\x00" + masked_seed + masked_db
    numbers = public.public_numbers()
    cipher = pow(int.from_bytes(em, "big"), numbers.e, numbers.n)
    return cipher.to_bytes(k, "big")


_OAEP_PADDING = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()),
                             algorithm=hashes.SHA256(), label=None)


# --- the scheme -------------------------------------------------------------------

def _ctr(key: bytes, data: bytes) -> bytes:
    cipher = Cipher(algorithms.AES(key), modes.CTR(bytes(16))).encryptor()
    return cipher.update(data) + cipher.finalize()


def _cbc_encrypt(key: bytes, plaintext: bytes) -> bytes:
    padder = sym_padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(key), modes.CBC(_ZERO_IV)).encryptor()
    return enc.update(padded) + enc.finalize()


def _cbc_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    if not ciphertext or len(ciphertext) % 16:
        raise PaddingInvalid("ciphertext not a positive multiple of 16")
    dec = Cipher(algorithms.AES(key), modes.CBC(_ZERO_IV)).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = sym_padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise PaddingInvalid(str(exc)) from None


def _encrypt_parts(keyring: AovercKeyring, plaintext: bytes, mode: str,
                   rng: RandomSource) -> tuple[AovercEnvelope, bytes, bytes]:
    if not plaintext:
        raise AovercError("plaintext must be non-empty")
    k1 = rng.bytes(_KEY_LEN)
    k2 = rng.bytes(_KEY_LEN)
    if mode == FAITHFUL:
        sed = _cbc_encrypt(k2, plaintext)
    elif mode == AEAD_MITIGATED:
        sed = AESGCM(k2).encrypt(_ZERO_NONCE, plaintext, None)
    else:
        raise AovercError("unknown mode %r" % mode)
    c1 = _ctr(k1, k2)
    c2 = _oaep_encrypt(keyring.peer_encrypt, k1 + c1, rng.bytes(_HASH_LEN))
    signature = keyring.local_sign.sign(
        c2, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
    return AovercEnvelope(_build_ekd(c2, signature), sed), k1, k2


def aoverc_encrypt(keyring: AovercKeyring, plaintext: bytes,
                   mode: str = FAITHFUL,
                   rng: RandomSource | None = None) -> AovercEnvelope:
    envelope, _, _ = _encrypt_parts(keyring, plaintext, mode, rng or RandomSource())
    return envelope


def _decrypt_detailed(keyring: AovercKeyring, envelope: AovercEnvelope,
                      mode: str = FAITHFUL) -> bytes:
    version, c2, signature = envelope.split_ekd()
    if version != EKD_VERSION:
        raise MalformedEnvelope("ekd version %d" % version)
    try:
        keyring.peer_verify.verify(signature, c2, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature:
        raise SignatureInvalid("ekd signature does not cover this c2") from None
    try:
        keys = keyring.local_decrypt.decrypt(c2, _OAEP_PADDING)
    except ValueError as exc:
        raise OaepDecodeFailure(str(exc)) from None
    if len(keys) != 2 * _KEY_LEN:
        raise OaepDecodeFailure("encapsulated keys are %d bytes" % len(keys))
    k1, c1 = keys[:_KEY_LEN], keys[_KEY_LEN:]
    k2 = _ctr(k1, c1)
    if mode == FAITHFUL:
        return _cbc_decrypt(k2, envelope.sed)
    if mode == AEAD_MITIGATED:
        try:
            return AESGCM(k2).decrypt(_ZERO_NONCE, envelope.sed, None)
        except Exception:
            raise TagInvalid("payload tag check failed") from None
    raise AovercError("unknown mode %r" % mode)


def aoverc_decrypt(keyring: AovercKeyring, envelope: AovercEnvelope,
                   mode: str = FAITHFUL) -> bytes:
    """Open an envelope; every failure is the same uniform DecryptFailed."""
    try:
        return _decrypt_detailed(keyring, envelope, mode)
    except AovercError:
        raise DecryptFailed("decrypt failed") from None


def forge_sample_type(envelope: AovercEnvelope, block_index: int,
                      xor_mask: bytes) -> AovercEnvelope:
    """Attacker's move: XOR a chosen mask into one 16-byte sed block.

    Needs no keys.  In faithful mode the block after block_index decrypts
    to plaintext ⊕ mask while block_index itself turns to noise.
    """
    if len(xor_mask) != 16:
        raise AovercError("mask must be exactly 16 bytes")
    if block_index < 0 or (block_index + 1) * 16 > len(envelope.sed):
        raise BlockOutOfRange("block %d outside %d-byte sed"
                              % (block_index, len(envelope.sed)))
    sed = bytearray(envelope.sed)
    start = block_index * 16
    sed[start:start + 16] = _xor(sed[start:start + 16], xor_mask)
    return AovercEnvelope(envelope.ekd, bytes(sed))
