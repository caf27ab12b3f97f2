"""Tunnel record protection: key schedule, AEAD sealing, anti-replay.

A sealed record is

    sequence   8 bytes, big-endian, starts at 1
    ciphertext AEAD(key, nonce = salt(4) ‖ sequence(8), aad = sequence(8))

Each direction owns its own 256-bit key and 4-byte salt; both fall out of
one key-schedule expansion over the handshake's DH secret and nonces:

    hsk_i(32) hsk_r(32) key_i(32) key_r(32) salt_i(4) salt_r(4)

hsk_* protect the handshake's own encrypted payloads, key_*/salt_* protect
tunnel records.  The class label is mixed into the expansion so the C and D
tunnels never share key material even off identical handshake secrets.

Receivers keep a 64-entry sliding replay window: each sequence number is
accepted at most once, and anything older than the window is refused.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import suites

__all__ = [
    "AuthTagMismatch",
    "KeyMaterial",
    "RecordCodec",
    "ReplayDetected",
    "ReplayWindow",
    "SequenceExhausted",
    "StaleSequence",
    "TunnelError",
    "TunnelSession",
    "derive_key_material",
    "session_pair",
]

WINDOW_SIZE = 64
_MAX_SEQ = (1 << 64) - 1

_PRF_HASHES = {
    suites.PRF_HMAC_SHA2_256: hashes.SHA256,
    suites.PRF_HMAC_SHA2_512: hashes.SHA512,
}


class TunnelError(Exception):
    pass


class AuthTagMismatch(TunnelError):
    pass


class ReplayDetected(TunnelError):
    pass


class StaleSequence(TunnelError):
    pass


class SequenceExhausted(TunnelError):
    pass


@dataclass
class KeyMaterial:
    hsk_i: bytes
    hsk_r: bytes
    key_i: bytes
    key_r: bytes
    salt_i: bytes
    salt_r: bytes

    def keylog_line(self, label: str, suite: suites.ChosenSuite) -> str:
        parts = [label] + [f.hex() for f in
                           (self.hsk_i, self.hsk_r, self.key_i, self.key_r,
                            self.salt_i, self.salt_r)]
        parts.append("%02x%02x%02x%02x" % (suite.encryption, suite.prf,
                                           suite.dh, suite.signature_hash))
        return " ".join(parts)

    @classmethod
    def from_keylog_line(cls, line: str) -> tuple[str, "KeyMaterial", suites.ChosenSuite]:
        label, *fields = line.split()
        if len(fields) != 7:
            raise ValueError("keylog line needs 8 fields, got %d" % (len(fields) + 1))
        raw = [bytes.fromhex(f) for f in fields[:6]]
        suite_bytes = bytes.fromhex(fields[6])
        suite = suites.ChosenSuite(*suite_bytes)
        return label, cls(*raw), suite


def derive_key_material(
    prf_alg: int,
    shared_secret: bytes,
    nonce_i: bytes,
    nonce_r: bytes,
    traffic_class: str,
) -> KeyMaterial:
    """Expand the handshake secrets into both directions' keys and salts."""
    algorithm = _PRF_HASHES[prf_alg]()
    okm = HKDF(
        algorithm=algorithm,
        length=136,
        salt=nonce_i + nonce_r,
        info=b"link tunnel v1 class " + traffic_class.encode("ascii"),
    ).derive(shared_secret)
    return KeyMaterial(
        hsk_i=okm[0:32], hsk_r=okm[32:64],
        key_i=okm[64:96], key_r=okm[96:128],
        salt_i=okm[128:132], salt_r=okm[132:136],
    )


class ReplayWindow:
    """RFC 4303-style sliding bitmap; bit 0 tracks the highest sequence seen."""

    def __init__(self, size: int = WINDOW_SIZE):
        self.size = size
        self.highest = 0
        self._bitmap = 0

    def check(self, seq: int) -> None:
        """Raise if seq must be refused; acceptance happens in update()."""
        if seq == 0:
            raise StaleSequence("sequence 0 never valid")
        if seq > self.highest:
            return
        offset = self.highest - seq
        if offset >= self.size:
            raise StaleSequence("sequence %d fell out of the window" % seq)
        if self._bitmap >> offset & 1:
            raise ReplayDetected("sequence %d already accepted" % seq)

    def update(self, seq: int) -> None:
        if seq > self.highest:
            shift = seq - self.highest
            self._bitmap = (self._bitmap << shift | 1) & ((1 << self.size) - 1)
            self.highest = seq
        else:
            self._bitmap |= 1 << (self.highest - seq)


def _aead(encryption_alg: int, key: bytes):
    if encryption_alg == suites.ENCR_AES_GCM_16:
        return AESGCM(key)
    if encryption_alg == suites.ENCR_CHACHA20_POLY1305:
        return ChaCha20Poly1305(key)
    raise TunnelError("no AEAD for algorithm %d" % encryption_alg)


@dataclass
class TunnelSession:
    traffic_class: str
    suite: suites.ChosenSuite
    send_key: bytes
    send_salt: bytes
    recv_key: bytes
    recv_salt: bytes
    send_seq: int = 1
    window: ReplayWindow = field(default_factory=ReplayWindow)

    def __post_init__(self) -> None:
        self._send_aead = _aead(self.suite.encryption, self.send_key)
        self._recv_aead = _aead(self.suite.encryption, self.recv_key)

    def seal(self, plaintext: bytes) -> bytes:
        if self.send_seq >= _MAX_SEQ:
            raise SequenceExhausted("send sequence space used up")
        seq = self.send_seq.to_bytes(8, "big")
        self.send_seq += 1
        return seq + self._send_aead.encrypt(self.send_salt + seq, plaintext, seq)

    def open(self, wire: bytes) -> bytes:
        if len(wire) < 8 + 16:
            raise AuthTagMismatch("record shorter than sequence + tag")
        seq_bytes, ciphertext = wire[:8], wire[8:]
        seq = int.from_bytes(seq_bytes, "big")
        self.window.check(seq)
        try:
            plaintext = self._recv_aead.decrypt(self.recv_salt + seq_bytes, ciphertext, seq_bytes)
        except InvalidTag as exc:
            raise AuthTagMismatch("sequence %d failed authentication" % seq) from exc
        self.window.update(seq)
        return plaintext


class RecordCodec:
    """Stateless opener/sealer for captured records, given exported keys.

    Unlike TunnelSession this keeps no replay window or sequence counter:
    offline tooling, and an on-path party holding a key log, must be able
    to open and re-seal any record in any order.
    """

    def __init__(self, material: KeyMaterial, suite: suites.ChosenSuite):
        self._aead_i = _aead(suite.encryption, material.key_i)
        self._aead_r = _aead(suite.encryption, material.key_r)
        self._salt_i = material.salt_i
        self._salt_r = material.salt_r

    def _pick(self, from_initiator: bool):
        if from_initiator:
            return self._aead_i, self._salt_i
        return self._aead_r, self._salt_r

    def open(self, wire: bytes, *, from_initiator: bool) -> tuple[int, bytes]:
        """Returns (sequence, plaintext); AuthTagMismatch if keys disagree."""
        if len(wire) < 8 + 16:
            raise AuthTagMismatch("record shorter than sequence + tag")
        seq_bytes, ciphertext = wire[:8], wire[8:]
        aead, salt = self._pick(from_initiator)
        try:
            plaintext = aead.decrypt(salt + seq_bytes, ciphertext, seq_bytes)
        except InvalidTag as exc:
            seq = int.from_bytes(seq_bytes, "big")
            raise AuthTagMismatch("sequence %d failed authentication"
                                  % seq) from exc
        return int.from_bytes(seq_bytes, "big"), plaintext

    def seal(self, seq: int, plaintext: bytes, *,
             from_initiator: bool) -> bytes:
        seq_bytes = seq.to_bytes(8, "big")
        aead, salt = self._pick(from_initiator)
        return seq_bytes + aead.encrypt(salt + seq_bytes, plaintext, seq_bytes)


def session_pair(
    traffic_class: str,
    suite: suites.ChosenSuite,
    material: KeyMaterial,
) -> tuple[TunnelSession, TunnelSession]:
    """Matched (initiator, responder) sessions off one key schedule."""
    initiator = TunnelSession(traffic_class, suite,
                              send_key=material.key_i, send_salt=material.salt_i,
                              recv_key=material.key_r, recv_salt=material.salt_r)
    responder = TunnelSession(traffic_class, suite,
                              send_key=material.key_r, send_salt=material.salt_r,
                              recv_key=material.key_i, recv_salt=material.salt_i)
    return initiator, responder
