"""Reduced IKEv2-style handshake and control-message engine.

Two round trips establish a per-class tunnel:

    SA_INIT  -->  preference lists, ephemeral DH public, nonce
    SA_INIT  <--  chosen suite, DH public, nonce     (or INVALID_KE retry)
    AUTH     -->  SK{ signature over transcript, device info, inner address }
    AUTH     <--  SK{ ... }

Messages are carried in link frames (type 0x04), so no length field of
their own:

    exchange_type  1 byte   34 SA_INIT / 35 AUTH / 37 INFORMATIONAL
    flags          1 byte   0x08 initiator, 0x20 response, 0x01 encrypted
    class          1 byte   0x43 'C' / 0x44 'D'
    message_id     4 bytes big-endian

followed by payloads, each   type(1) ‖ length(2, big-endian) ‖ value:

    33 SA      category(1) ‖ count(1) ‖ count x alg-id(2)  repeated;
               categories: 1 encryption, 2 prf, 3 dh group, 4 signature hash
    34 KE      dh group(2) ‖ public key
    39 AUTH    method(1, =14 digital signature) ‖ DER ECDSA signature
    40 NONCE   16 random bytes
    41 NOTIFY  notify type(2) ‖ data
    46 SK      sequence(8) ‖ AEAD(handshake key,
                                  nonce = 0x00x4 ‖ sequence,
                                  aad   = the 7-byte message header)

This is deliberately not RFC 7296: no SPIs, cookies, rekeying or child
SAs.  The interesting behavior lives in the custom notify payloads and in
whether unencrypted INFORMATIONAL notifies are honored (the vulnerable
mode) or refused (strict, the default).

Responder suite selection takes the first entry of the initiator's
preference list that the responder also supports, per category.  The
initiator guesses its first DH group in SA_INIT; a responder that settles
on a different group answers with NOTIFY INVALID_KE_PAYLOAD naming it and
the initiator retries once.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.x448 import X448PrivateKey, X448PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from . import ldm, suites
from .identity import DeviceIdentity
from .rng import RandomSource
from .tunnel import KeyMaterial, TunnelSession, derive_key_material, _aead

__all__ = [
    "AuthFailure",
    "Effect",
    "EXCHANGE_AUTH",
    "EXCHANGE_INFORMATIONAL",
    "EXCHANGE_SA_INIT",
    "HandshakeFailure",
    "IkeEngine",
    "IkeError",
    "IkeInitiator",
    "IkeMessage",
    "IkePayload",
    "IkeResponder",
    "NOTIFY_INVALID_KE",
    "Timeout",
    "UnexpectedMessage",
    "UnsupportedGroup",
    "ike_decode",
    "ike_encode",
]

EXCHANGE_SA_INIT = 34
EXCHANGE_AUTH = 35
EXCHANGE_INFORMATIONAL = 37

EXCHANGE_NAMES = {
    EXCHANGE_SA_INIT: "SA_INIT",
    EXCHANGE_AUTH: "AUTH",
    EXCHANGE_INFORMATIONAL: "INFORMATIONAL",
}

FLAG_INITIATOR = 0x08
FLAG_RESPONSE = 0x20
FLAG_ENCRYPTED = 0x01

PAYLOAD_SA = 33
PAYLOAD_KE = 34
PAYLOAD_AUTH = 39
PAYLOAD_NONCE = 40
PAYLOAD_NOTIFY = 41
PAYLOAD_SK = 46

PAYLOAD_NAMES = {
    PAYLOAD_SA: "SA",
    PAYLOAD_KE: "KE",
    PAYLOAD_AUTH: "AUTH",
    PAYLOAD_NONCE: "NONCE",
    PAYLOAD_NOTIFY: "NOTIFY",
    PAYLOAD_SK: "SK",
}

NOTIFY_INVALID_KE = 17      # retry with the named group
AUTH_METHOD_SIGNATURE = 14

NONCE_LEN = 16
KEEPALIVE_MISS_LIMIT = 3

_HEADER = struct.Struct(">BBBI")

_SA_CATEGORIES = (
    (1, "encryption"),
    (2, "prf"),
    (3, "dh"),
    (4, "signature_hash"),
)


class IkeError(Exception):
    pass


class AuthFailure(IkeError):
    pass


class HandshakeFailure(IkeError):
    pass


class UnsupportedGroup(IkeError):
    pass


class UnexpectedMessage(IkeError):
    pass


class Timeout(IkeError):
    pass


@dataclass
class IkePayload:
    ptype: int
    value: bytes

    @property
    def type_name(self) -> str:
        return PAYLOAD_NAMES.get(self.ptype, "type-%d" % self.ptype)


@dataclass
class IkeMessage:
    exchange_type: int
    flags: int
    traffic_class: str
    message_id: int
    payloads: list[IkePayload] = field(default_factory=list)

    @property
    def is_response(self) -> bool:
        return bool(self.flags & FLAG_RESPONSE)

    @property
    def is_encrypted(self) -> bool:
        return any(p.ptype == PAYLOAD_SK for p in self.payloads)

    def header(self) -> bytes:
        return _HEADER.pack(self.exchange_type, self.flags,
                            ord(self.traffic_class), self.message_id)

    def first(self, ptype: int) -> IkePayload | None:
        for payload in self.payloads:
            if payload.ptype == ptype:
                return payload
        return None

    def notifies(self) -> list[tuple[int, bytes]]:
        out = []
        for payload in self.payloads:
            if payload.ptype == PAYLOAD_NOTIFY and len(payload.value) >= 2:
                out.append((int.from_bytes(payload.value[:2], "big"), payload.value[2:]))
        return out


def notify_payload(notify_type: int, data: bytes = b"") -> IkePayload:
    return IkePayload(PAYLOAD_NOTIFY, notify_type.to_bytes(2, "big") + data)


def ike_encode(msg: IkeMessage) -> bytes:
    out = bytearray(msg.header())
    for payload in msg.payloads:
        if len(payload.value) > 0xFFFF:
            raise IkeError("payload too large")
        out += struct.pack(">BH", payload.ptype, len(payload.value))
        out += payload.value
    return bytes(out)


def ike_decode(data: bytes) -> IkeMessage:
    if len(data) < _HEADER.size:
        raise UnexpectedMessage("short message (%d bytes)" % len(data))
    exchange_type, flags, class_byte, message_id = _HEADER.unpack_from(data)
    if exchange_type not in EXCHANGE_NAMES:
        raise UnexpectedMessage("unknown exchange type %d" % exchange_type)
    if class_byte not in (0x43, 0x44):
        raise UnexpectedMessage("unknown class byte 0x%02x" % class_byte)
    payloads = []
    offset = _HEADER.size
    while offset < len(data):
        if offset + 3 > len(data):
            raise UnexpectedMessage("truncated payload header")
        ptype, length = struct.unpack_from(">BH", data, offset)
        offset += 3
        if offset + length > len(data):
            raise UnexpectedMessage("payload overruns message")
        payloads.append(IkePayload(ptype, data[offset:offset + length]))
        offset += length
    return IkeMessage(exchange_type, flags, chr(class_byte), message_id, payloads)


# --- SA payload ---------------------------------------------------------------

def encode_sa(profile: suites.Profile) -> IkePayload:
    out = bytearray()
    for tag, category in _SA_CATEGORIES:
        ids = getattr(profile, category)
        out += bytes([tag, len(ids)])
        for alg in ids:
            out += alg.to_bytes(2, "big")
    return IkePayload(PAYLOAD_SA, bytes(out))


def decode_sa(payload: IkePayload) -> suites.Profile:
    lists: dict[str, tuple[int, ...]] = {}
    data, offset = payload.value, 0
    by_tag = dict(_SA_CATEGORIES)
    while offset < len(data):
        if offset + 2 > len(data):
            raise UnexpectedMessage("truncated SA category")
        tag, count = data[offset], data[offset + 1]
        offset += 2
        if tag not in by_tag:
            raise UnexpectedMessage("unknown SA category %d" % tag)
        if offset + 2 * count > len(data):
            raise UnexpectedMessage("SA category overruns payload")
        lists[by_tag[tag]] = tuple(
            int.from_bytes(data[offset + 2 * i:offset + 2 * i + 2], "big")
            for i in range(count)
        )
        offset += 2 * count
    missing = [name for _, name in _SA_CATEGORIES if name not in lists]
    if missing:
        raise UnexpectedMessage("SA payload missing %s" % ", ".join(missing))
    return suites.Profile(name="peer", **lists)


def _chosen_profile(chosen: suites.ChosenSuite) -> suites.Profile:
    return suites.Profile(
        name="chosen",
        encryption=(chosen.encryption,),
        prf=(chosen.prf,),
        dh=(chosen.dh,),
        signature_hash=(chosen.signature_hash,),
    )


def _profile_head(profile: suites.Profile) -> suites.ChosenSuite:
    return suites.ChosenSuite(
        encryption=profile.encryption[0],
        prf=profile.prf[0],
        dh=profile.dh[0],
        signature_hash=profile.signature_hash[0],
    )


# --- ephemeral DH -------------------------------------------------------------

_KE_SIZES = {suites.DH_CURVE25519: 32, suites.DH_CURVE448: 56}


class _Ephemeral:
    def __init__(self, group: int, rng: RandomSource):
        if group == suites.DH_CURVE25519:
            self._key = X25519PrivateKey.from_private_bytes(rng.bytes(32))
        elif group == suites.DH_CURVE448:
            self._key = X448PrivateKey.from_private_bytes(rng.bytes(56))
        else:
            # ECP-521 / MODP-8192 stay negotiable for custom profiles but
            # have no key generator here
            raise UnsupportedGroup("dh group %d not implemented" % group)
        self.group = group

    def public_bytes(self) -> bytes:
        return self._key.public_key().public_bytes_raw()

    def shared(self, peer_public: bytes) -> bytes:
        if self.group == suites.DH_CURVE25519:
            return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))
        return self._key.exchange(X448PublicKey.from_public_bytes(peer_public))


def encode_ke(ephemeral: _Ephemeral) -> IkePayload:
    return IkePayload(PAYLOAD_KE, ephemeral.group.to_bytes(2, "big") + ephemeral.public_bytes())


def decode_ke(payload: IkePayload) -> tuple[int, bytes]:
    if len(payload.value) < 2:
        raise UnexpectedMessage("KE payload too short")
    return int.from_bytes(payload.value[:2], "big"), payload.value[2:]


# --- transcript signatures ------------------------------------------------------

def _transcript_data(sighash: int, transcript: bytes, role: bytes) -> bytes:
    blob = transcript + role
    if sighash == suites.SIGHASH_SHA2_256:
        return hashlib.sha256(blob).digest()
    return blob  # SIGHASH_IDENTITY: sign the raw transcript


def _sign_transcript(key, sighash: int, transcript: bytes, role: bytes) -> bytes:
    data = _transcript_data(sighash, transcript, role)
    # deterministic nonces keep rerun transcripts byte-identical
    return key.sign(data, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))


def _verify_transcript(key, sighash: int, transcript: bytes, role: bytes, sig: bytes) -> None:
    data = _transcript_data(sighash, transcript, role)
    try:
        key.verify(sig, data, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature as exc:
        raise AuthFailure("transcript signature invalid") from exc


# --- effects --------------------------------------------------------------------

@dataclass
class Effect:
    kind: str        # PeerAddressUpdated / LinkPreferenceChanged /
                     # ProxyEndpointUpdated / Restarted / SessionDown
    detail: dict


TERMINUS_VERSION = b"2"


class IkeEngine:
    """Shared state machine halves; use IkeInitiator / IkeResponder."""

    role_byte = b"?"

    def __init__(
        self,
        identity: DeviceIdentity,
        traffic_class: str,
        profile: suites.Profile,
        rng: RandomSource | None = None,
        strict: bool = True,
        inner_address: str = "",
        local_address: tuple[str, int] | None = None,
        on_security_event=None,
    ):
        if traffic_class not in ("C", "D"):
            raise IkeError("traffic class must be 'C' or 'D'")
        self.identity = identity
        self.traffic_class = traffic_class
        self.profile = profile
        self.rng = rng or RandomSource()
        self.strict = strict
        self.inner_address = inner_address
        self.local_address = local_address
        self.on_security_event = on_security_event

        self.established = False
        self.down = False
        self.chosen: suites.ChosenSuite | None = None
        self.material: KeyMaterial | None = None
        self.session: TunnelSession | None = None
        self.peer_info: dict[str, str] = {}
        self.peer_inner_address: str | None = None
        self.peer_address: tuple[str, int] | None = None
        self.prefer_wifi = False
        self.proxy_endpoint: tuple[str, int] | None = None
        self.link_state: int | None = None

        self._transcript_request = b""
        self._transcript_response = b""
        self._send_sk_seq = 1
        self._recv_sk_seq = 0
        self._next_message_id = 2
        self._keepalive_pending = 0

    # -- SK sealing ---------------------------------------------------------

    def _sk_keys(self) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def seal_message(self, exchange_type: int, payloads: list[IkePayload],
                     response: bool = False, message_id: int | None = None) -> IkeMessage:
        send_key, _ = self._sk_keys()
        if message_id is None:
            message_id = self._next_message_id
            self._next_message_id += 1
        flags = self._base_flags(response) | FLAG_ENCRYPTED
        msg = IkeMessage(exchange_type, flags, self.traffic_class, message_id)
        inner = b"".join(
            struct.pack(">BH", p.ptype, len(p.value)) + p.value for p in payloads
        )
        seq = self._send_sk_seq
        self._send_sk_seq += 1
        seq_bytes = seq.to_bytes(8, "big")
        aead = _aead(self.chosen.encryption, send_key)
        ciphertext = aead.encrypt(b"\x00" * 4 + seq_bytes, inner, msg.header())
        msg.payloads.append(IkePayload(PAYLOAD_SK, seq_bytes + ciphertext))
        return msg

    def unseal(self, msg: IkeMessage) -> list[IkePayload]:
        _, recv_key = self._sk_keys()
        sk = msg.first(PAYLOAD_SK)
        if sk is None or len(sk.value) < 8 + 16:
            raise AuthFailure("no usable SK payload")
        seq = int.from_bytes(sk.value[:8], "big")
        if seq <= self._recv_sk_seq:  # reliable transport: strictly increasing
            raise AuthFailure("SK sequence went backwards")
        aead = _aead(self.chosen.encryption, recv_key)
        try:
            inner = aead.decrypt(b"\x00" * 4 + sk.value[:8], sk.value[8:], msg.header())
        except InvalidTag as exc:
            raise AuthFailure("SK payload failed authentication") from exc
        self._recv_sk_seq = seq
        shell = ike_decode(msg.header() + inner)
        return shell.payloads

    def _base_flags(self, response: bool) -> int:
        flags = FLAG_RESPONSE if response else 0
        if self.role_byte == b"I":
            flags |= FLAG_INITIATOR
        return flags

    # -- shared handshake pieces ---------------------------------------------

    def _auth_payloads(self) -> list[IkePayload]:
        sighash = self.chosen.signature_hash
        transcript = self._transcript_request + self._transcript_response
        signature = _sign_transcript(
            self.identity.signing_key(self.traffic_class), sighash, transcript, self.role_byte)
        inner_notify = self._inner_address_notify()
        return [
            IkePayload(PAYLOAD_AUTH, bytes([AUTH_METHOD_SIGNATURE]) + signature),
            notify_payload(ldm.NOTIFY_TERMINUS_VERSION, TERMINUS_VERSION),
            notify_payload(ldm.NOTIFY_DEVICE_NAME, self.identity.device_name.encode("utf-8")),
            notify_payload(ldm.NOTIFY_BUILD_VERSION, self.identity.build_version.encode("utf-8")),
            notify_payload(inner_notify, ldm.pack_ipv6(self.inner_address)),
        ]

    def _inner_address_notify(self) -> int:
        if self.traffic_class == "D":
            return (ldm.NOTIFY_IADR_INITIATOR_CLASS_D if self.role_byte == b"I"
                    else ldm.NOTIFY_IADR_RESPONDER_CLASS_D)
        return (ldm.NOTIFY_IADR_INITIATOR_CLASS_C if self.role_byte == b"I"
                else ldm.NOTIFY_IADR_RESPONDER_CLASS_C)

    def _verify_auth(self, payloads: list[IkePayload], peer_role: bytes) -> None:
        auth = next((p for p in payloads if p.ptype == PAYLOAD_AUTH), None)
        if auth is None or len(auth.value) < 2 or auth.value[0] != AUTH_METHOD_SIGNATURE:
            raise AuthFailure("missing or malformed AUTH payload")
        transcript = self._transcript_request + self._transcript_response
        _verify_transcript(
            self.identity.peer_verify_key(self.traffic_class),
            self.chosen.signature_hash, transcript, peer_role, auth.value[1:])
        self._absorb_peer_info(payloads)

    def _absorb_peer_info(self, payloads: list[IkePayload]) -> None:
        for payload in payloads:
            if payload.ptype != PAYLOAD_NOTIFY or len(payload.value) < 2:
                continue
            ntype = int.from_bytes(payload.value[:2], "big")
            data = payload.value[2:]
            if ntype == ldm.NOTIFY_TERMINUS_VERSION:
                self.peer_info["terminus_version"] = data.decode("utf-8", "replace")
            elif ntype == ldm.NOTIFY_DEVICE_NAME:
                self.peer_info["device_name"] = data.decode("utf-8", "replace")
            elif ntype == ldm.NOTIFY_BUILD_VERSION:
                self.peer_info["build_version"] = data.decode("utf-8", "replace")
            elif ntype in (ldm.NOTIFY_IADR_INITIATOR_CLASS_C, ldm.NOTIFY_IADR_INITIATOR_CLASS_D,
                           ldm.NOTIFY_IADR_RESPONDER_CLASS_C, ldm.NOTIFY_IADR_RESPONDER_CLASS_D):
                self.peer_inner_address = ldm.unpack_ipv6(data)

    def _establish(self, send_key, send_salt, recv_key, recv_salt) -> None:
        self.session = TunnelSession(
            self.traffic_class, self.chosen,
            send_key=send_key, send_salt=send_salt,
            recv_key=recv_key, recv_salt=recv_salt)
        self.established = True

    # -- post-handshake control messages --------------------------------------

    def _security_event(self, kind: str, detail: str) -> None:
        if self.on_security_event is not None:
            self.on_security_event(kind, detail)

    def state_hash(self) -> str:
        """Digest of everything notify processing may change."""
        blob = repr((self.peer_address, self.prefer_wifi, self.proxy_endpoint,
                     self.link_state, self.peer_inner_address, self.established,
                     self.down, self.chosen)).encode()
        return hashlib.sha256(blob).hexdigest()

    def process_notify(self, msg: IkeMessage) -> list[Effect]:
        """Apply an INFORMATIONAL message's notify payloads.

        Strict mode only honors payloads that arrive inside a valid SK
        payload; plaintext notifies are dropped and logged.  Vulnerable
        mode applies plaintext notifies too, which is exactly the hole the
        redirect attack drives through.
        """
        if msg.exchange_type != EXCHANGE_INFORMATIONAL:
            raise UnexpectedMessage("process_notify wants INFORMATIONAL")
        effects: list[Effect] = []
        plaintext = [p for p in msg.payloads if p.ptype == PAYLOAD_NOTIFY]
        authenticated: list[IkePayload] = []
        if msg.first(PAYLOAD_SK) is not None:
            authenticated = self.unseal(msg)
        if plaintext:
            if self.strict:
                self._security_event(
                    "UnauthenticatedNotify",
                    "dropped %d plaintext notify payload(s) on class %s"
                    % (len(plaintext), self.traffic_class))
            else:
                authenticated = plaintext + authenticated
        for payload in authenticated:
            if payload.ptype != PAYLOAD_NOTIFY or len(payload.value) < 2:
                continue
            ntype = int.from_bytes(payload.value[:2], "big")
            effects.extend(self._apply_notify(ntype, payload.value[2:]))
        if not msg.is_response and self._keepalive_pending:
            self._keepalive_pending = 0
        return effects

    def _apply_notify(self, ntype: int, data: bytes) -> list[Effect]:
        if ntype == ldm.NOTIFY_PROXY:
            try:
                host, port = ldm.unpack_address(data)
            except ldm.LdmError:
                return []
            self.proxy_endpoint = (host, port)
            return [Effect("ProxyEndpointUpdated", {"host": host, "port": port})]
        if ntype == ldm.NOTIFY_LINK_DIRECTOR:
            try:
                director = ldm.ldm_decode(ldm.NotifyPayload(ntype, data))
            except ldm.LdmError:
                return []
            return self._apply_ldm(director)
        # forward compatibility: unknown types are skipped
        return []

    def _apply_ldm(self, director: ldm.LinkDirectorMessage) -> list[Effect]:
        effects = []
        for tlv in director.tlvs:
            if tlv.tlv_type in (ldm.TLV_UPDATE_WIFI_ADDRESS_IPV4, ldm.TLV_UPDATE_WIFI_ADDRESS_IPV6):
                host, port = ldm.tlv_address(tlv)
                previous = self.peer_address
                self.peer_address = (host, port)
                effects.append(Effect("PeerAddressUpdated",
                                      {"host": host, "port": port, "previous": previous}))
            elif tlv.tlv_type == ldm.TLV_HELLO:
                effects.append(Effect("Restarted", {}))
            elif tlv.tlv_type == ldm.TLV_PREFER_WIFI:
                self.prefer_wifi = True
                effects.append(Effect("LinkPreferenceChanged", {"prefer_wifi": True}))
            elif tlv.tlv_type == ldm.TLV_PREFER_WIFI_ACK:
                effects.append(Effect("LinkPreferenceChanged",
                                      {"prefer_wifi_ack": bool(tlv.value[0])}))
            elif tlv.tlv_type == ldm.TLV_DEVICE_LINK_STATE:
                self.link_state = tlv.value[0]
                effects.append(Effect("LinkPreferenceChanged", {"link_state": tlv.value[0]}))
            # UpdateWiFiSignature and ForceWoW parsed but inert
        return effects

    def _address_tlvs(self) -> list[ldm.LdmTlv]:
        if self.local_address is None:
            return [ldm.LdmTlv(ldm.TLV_HELLO)]
        host, port = self.local_address
        return [ldm.wifi_update_tlv(host, port)]

    def address_update_message(self, response: bool = False) -> IkeMessage:
        """Encrypted INFORMATIONAL carrying our current link address."""
        director = ldm.LinkDirectorMessage(self.rng.bytes(8), self._address_tlvs())
        payload = ldm.ldm_encode(director)
        return self.seal_message(
            EXCHANGE_INFORMATIONAL,
            [notify_payload(payload.notify_type, payload.data)],
            response=response)

    def keepalive_tick(self) -> IkeMessage | None:
        """Emit the periodic address keepalive; None once the peer is down."""
        if self.down or not self.established:
            return None
        if self._keepalive_pending >= KEEPALIVE_MISS_LIMIT:
            self.down = True
            self._security_event("PeerUnresponsive",
                                 "class %s: %d keepalives unanswered"
                                 % (self.traffic_class, self._keepalive_pending))
            return None
        self._keepalive_pending += 1
        return self.address_update_message()

    def keepalive_answered(self) -> None:
        self._keepalive_pending = 0


class IkeInitiator(IkeEngine):
    role_byte = b"I"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._ephemeral: _Ephemeral | None = None
        self._nonce = b""
        self._retried = False
        self._state = "idle"

    def _sk_keys(self) -> tuple[bytes, bytes]:
        return self.material.hsk_i, self.material.hsk_r

    def start(self, dh_group: int | None = None) -> IkeMessage:
        group = dh_group if dh_group is not None else self.profile.dh[0]
        self._ephemeral = _Ephemeral(group, self.rng)
        self._nonce = self.rng.bytes(NONCE_LEN)
        msg = IkeMessage(EXCHANGE_SA_INIT, self._base_flags(response=False),
                         self.traffic_class, 0,
                         [encode_sa(self.profile), encode_ke(self._ephemeral),
                          IkePayload(PAYLOAD_NONCE, self._nonce)])
        self._transcript_request = ike_encode(msg)
        self._state = "await_sa_init"
        return msg

    def handle(self, msg: IkeMessage) -> IkeMessage | None:
        if self._state == "await_sa_init" and msg.exchange_type == EXCHANGE_SA_INIT:
            return self._handle_sa_init_response(msg)
        if self._state == "await_auth" and msg.exchange_type == EXCHANGE_AUTH:
            return self._handle_auth_response(msg)
        raise UnexpectedMessage("state %s got %s" % (
            self._state, EXCHANGE_NAMES.get(msg.exchange_type, msg.exchange_type)))

    def _handle_sa_init_response(self, msg: IkeMessage) -> IkeMessage:
        for ntype, data in msg.notifies():
            if ntype == NOTIFY_INVALID_KE:
                if self._retried:
                    raise HandshakeFailure("responder rejected the retried KE group too")
                if len(data) != 2:
                    raise UnexpectedMessage("INVALID_KE without a group id")
                group = int.from_bytes(data, "big")
                if group not in self.profile.dh:
                    raise HandshakeFailure("responder named group %d we never offered" % group)
                self._retried = True
                return self.start(dh_group=group)
        sa, ke, nonce = msg.first(PAYLOAD_SA), msg.first(PAYLOAD_KE), msg.first(PAYLOAD_NONCE)
        if sa is None or ke is None or nonce is None:
            raise UnexpectedMessage("SA_INIT response missing payloads")
        self.chosen = _profile_head(decode_sa(sa))
        for category in ("encryption", "prf", "dh", "signature_hash"):
            if getattr(self.chosen, category) not in getattr(self.profile, category):
                raise HandshakeFailure("responder chose a %s we never offered" % category)
        group, peer_public = decode_ke(ke)
        if group != self._ephemeral.group or group != self.chosen.dh:
            raise HandshakeFailure("responder KE group mismatch")
        shared = self._ephemeral.shared(peer_public)
        self._transcript_response = ike_encode(msg)
        self.material = derive_key_material(
            self.chosen.prf, shared, self._nonce, nonce.value, self.traffic_class)
        auth = self.seal_message(EXCHANGE_AUTH, self._auth_payloads(), message_id=1)
        self._state = "await_auth"
        return auth

    def _handle_auth_response(self, msg: IkeMessage) -> None:
        payloads = self.unseal(msg)
        self._verify_auth(payloads, peer_role=b"R")
        self._establish(self.material.key_i, self.material.salt_i,
                        self.material.key_r, self.material.salt_r)
        self._state = "established"
        return None


class IkeResponder(IkeEngine):
    role_byte = b"R"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._ephemeral: _Ephemeral | None = None
        self._state = "await_sa_init"

    def _sk_keys(self) -> tuple[bytes, bytes]:
        return self.material.hsk_r, self.material.hsk_i

    def handle(self, msg: IkeMessage) -> IkeMessage | None:
        if self._state == "await_sa_init" and msg.exchange_type == EXCHANGE_SA_INIT:
            return self._handle_sa_init(msg)
        if self._state == "await_auth" and msg.exchange_type == EXCHANGE_AUTH:
            return self._handle_auth(msg)
        raise UnexpectedMessage("state %s got %s" % (
            self._state, EXCHANGE_NAMES.get(msg.exchange_type, msg.exchange_type)))

    def _handle_sa_init(self, msg: IkeMessage) -> IkeMessage:
        sa, ke, nonce = msg.first(PAYLOAD_SA), msg.first(PAYLOAD_KE), msg.first(PAYLOAD_NONCE)
        if sa is None or ke is None or nonce is None:
            raise UnexpectedMessage("SA_INIT request missing payloads")
        peer_profile = decode_sa(sa)
        self.chosen = suites.negotiate(peer_profile, self.profile)
        group, peer_public = decode_ke(ke)
        if group != self.chosen.dh:
            # initiator guessed a different group: name ours, let it retry
            return IkeMessage(
                EXCHANGE_SA_INIT, self._base_flags(response=True), self.traffic_class, 0,
                [notify_payload(NOTIFY_INVALID_KE, self.chosen.dh.to_bytes(2, "big"))])
        self._ephemeral = _Ephemeral(self.chosen.dh, self.rng)
        shared = self._ephemeral.shared(peer_public)
        own_nonce = self.rng.bytes(NONCE_LEN)
        reply = IkeMessage(
            EXCHANGE_SA_INIT, self._base_flags(response=True), self.traffic_class, 0,
            [encode_sa(_chosen_profile(self.chosen)), encode_ke(self._ephemeral),
             IkePayload(PAYLOAD_NONCE, own_nonce)])
        self._transcript_request = ike_encode(msg)
        self._transcript_response = ike_encode(reply)
        self.material = derive_key_material(
            self.chosen.prf, shared, nonce.value, own_nonce, self.traffic_class)
        self._state = "await_auth"
        return reply

    def _handle_auth(self, msg: IkeMessage) -> IkeMessage:
        payloads = self.unseal(msg)
        self._verify_auth(payloads, peer_role=b"I")
        reply = self.seal_message(EXCHANGE_AUTH, self._auth_payloads(),
                                  response=True, message_id=1)
        self._establish(self.material.key_r, self.material.salt_r,
                        self.material.key_i, self.material.salt_i)
        self._state = "established"
        return reply


def run_handshake(initiator: IkeInitiator, responder: IkeResponder) -> None:
    """In-memory pump: drive both engines to established or raise."""
    outbound = initiator.start()
    for _ in range(8):
        reply = responder.handle(ike_decode(ike_encode(outbound)))
        outbound = initiator.handle(ike_decode(ike_encode(reply)))
        if outbound is None:
            if not (initiator.established and responder.established):
                raise HandshakeFailure("pump finished without sessions")
            return
    raise HandshakeFailure("handshake did not converge")
