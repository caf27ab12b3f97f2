import random

import pytest

from witchstack import ldm
from witchstack.ldm import (
    BadVersion,
    LdmTlv,
    LengthMismatch,
    LinkDirectorMessage,
    MalformedTlv,
    NotifyPayload,
    ldm_decode,
    ldm_encode,
    tlv_address,
    wifi_update_tlv,
)


def test_known_notify_types_exact():
    assert ldm.KNOWN_NOTIFY_TYPES == {
        48601, 48602, 48603, 48604,
        50701, 50702,
        50801, 50802, 50811, 50812,
        51401, 51501,
    }


def test_ipv4_update_value_bytes():
    # port 5000 = 0x1388, address 10.0.0.7
    tlv = wifi_update_tlv("10.0.0.7", 5000)
    assert tlv.tlv_type == ldm.TLV_UPDATE_WIFI_ADDRESS_IPV4
    assert tlv.value == bytes([0x13, 0x88, 0x0A, 0x00, 0x00, 0x07])
    assert tlv_address(tlv) == ("10.0.0.7", 5000)


def test_ipv6_update_round_trip():
    tlv = wifi_update_tlv("fd00::1:2", 62742)
    assert tlv.tlv_type == ldm.TLV_UPDATE_WIFI_ADDRESS_IPV6
    assert len(tlv.value) == 18
    assert tlv_address(tlv) == ("fd00::1:2", 62742)


def test_encode_header_layout():
    payload = ldm_encode(LinkDirectorMessage(b"IDENTIFY", [LdmTlv(ldm.TLV_HELLO)]))
    assert payload.notify_type == 50702
    data = payload.data
    assert data[0] == 2            # version
    assert data[1] == 0            # reserved
    assert data[2:4] == b"\x00\x03"  # TLV byte length
    assert data[4:8] == b"\x00" * 4
    assert data[8:16] == b"IDENTIFY"
    assert data[16:] == b"\x01\x00\x00"


def test_empty_hello_round_trips():
    msg = LinkDirectorMessage(b"\x00" * 8, [LdmTlv(ldm.TLV_HELLO)])
    assert ldm_decode(ldm_encode(msg)) == msg


def test_bad_version_rejected():
    data = bytearray(ldm_encode(LinkDirectorMessage()).data)
    data[0] = 3
    with pytest.raises(BadVersion):
        ldm_decode(NotifyPayload(50702, bytes(data)))
    with pytest.raises(BadVersion):
        ldm_encode(LinkDirectorMessage(version=3))


def test_length_mismatch_rejected():
    data = bytearray(ldm_encode(LinkDirectorMessage(tlvs=[LdmTlv(5)])).data)
    data[3] += 1
    with pytest.raises(LengthMismatch):
        ldm_decode(bytes(data))


def test_reserved_bytes_must_be_zero():
    data = bytearray(ldm_encode(LinkDirectorMessage()).data)
    data[5] = 1
    with pytest.raises(MalformedTlv):
        ldm_decode(bytes(data))


def test_tlv_shape_validation():
    with pytest.raises(MalformedTlv):
        LdmTlv(ldm.TLV_HELLO, b"x")          # must be empty
    with pytest.raises(MalformedTlv):
        LdmTlv(ldm.TLV_UPDATE_WIFI_ADDRESS_IPV4, b"\x00" * 5)
    with pytest.raises(MalformedTlv):
        LdmTlv(ldm.TLV_DEVICE_LINK_STATE, b"\x03")  # only 1 or 2
    with pytest.raises(MalformedTlv):
        LdmTlv(9, b"")                        # unknown type
    LdmTlv(ldm.TLV_DEVICE_LINK_STATE, b"\x02")
    LdmTlv(ldm.TLV_UPDATE_WIFI_SIGNATURE, b"arbitrary length")


def _random_tlv(rng: random.Random) -> LdmTlv:
    tlv_type = rng.choice(list(ldm.TLV_NAMES))
    want = ldm._TLV_VALUE_LEN[tlv_type]
    if tlv_type == ldm.TLV_DEVICE_LINK_STATE:
        return LdmTlv(tlv_type, bytes([rng.choice((1, 2))]))
    if want is None:
        return LdmTlv(tlv_type, rng.randbytes(rng.randrange(0, 24)))
    return LdmTlv(tlv_type, rng.randbytes(want))


def test_round_trip_randomized_tlv_sets():
    rng = random.Random(50702)
    for _ in range(1000):
        msg = LinkDirectorMessage(
            rng.randbytes(8), [_random_tlv(rng) for _ in range(rng.randrange(0, 5))]
        )
        assert ldm_decode(ldm_encode(msg)) == msg
