import random
import threading

import pytest

from witchstack.inner import (
    CONTROL_PORT,
    ConnectionRefused,
    InnerError,
    InnerMux,
    InnerPacket,
    MuxClosed,
    OP_DATA,
    OP_SYN,
    decode_packet,
    encode_packet,
)


def mux_pair():
    """Two muxes wired back to back; delivery runs threaded like real use."""
    holder = {}

    def to_watch(data):
        threading.Thread(target=holder["watch"].handle_packet, args=(data,)).start()

    def to_phone(data):
        threading.Thread(target=holder["phone"].handle_packet, args=(data,)).start()

    holder["phone"] = InnerMux("phone", to_watch)
    holder["watch"] = InnerMux("watch", to_phone)
    return holder["phone"], holder["watch"]


def test_packet_layout():
    raw = encode_packet(InnerPacket(OP_DATA, 0x01020304, CONTROL_PORT, b"hi"))
    assert raw == bytes([2, 1, 2, 3, 4]) + (61315).to_bytes(2, "big") + b"hi"


def test_packet_round_trip_randomized():
    rng = random.Random(61315)
    for _ in range(1000):
        packet = InnerPacket(rng.choice((1, 2, 3, 4)), rng.randrange(1 << 32),
                             rng.randrange(1 << 16), rng.randbytes(rng.randrange(0, 64)))
        assert decode_packet(encode_packet(packet)) == packet


def test_decode_rejects_garbage():
    with pytest.raises(InnerError):
        decode_packet(b"\x01\x02")
    with pytest.raises(InnerError):
        decode_packet(encode_packet(InnerPacket(2, 1, 1))[:6])
    bad_op = bytes([9]) + bytes(6)
    with pytest.raises(InnerError):
        decode_packet(bad_op)


def test_connect_and_exchange():
    phone, watch = mux_pair()
    served = {}

    def handler(conn):
        served["conn"] = conn

    phone.listen(CONTROL_PORT, handler)
    client = watch.connect(CONTROL_PORT, timeout=2.0)
    client.send(b"client speaks first")
    assert served["conn"].recv(2.0) == b"client speaks first"
    served["conn"].send(b"reply")
    assert client.recv(2.0) == b"reply"


def test_connection_ids_by_side():
    phone, watch = mux_pair()
    phone.listen(1000, lambda conn: None)
    watch.listen(1000, lambda conn: None)
    from_watch = watch.connect(1000, timeout=2.0)
    from_phone = phone.connect(1000, timeout=2.0)
    assert from_watch.conn_id % 2 == 1
    assert from_phone.conn_id % 2 == 0


def test_connect_to_closed_port_refused():
    phone, watch = mux_pair()
    with pytest.raises(ConnectionRefused):
        watch.connect(4242, timeout=2.0)


def test_fin_drains_to_empty():
    phone, watch = mux_pair()
    server_conns = []
    phone.listen(2000, server_conns.append)
    client = watch.connect(2000, timeout=2.0)
    client.send(b"part one ")
    client.send(b"part two")
    client.close()
    import time
    deadline = time.monotonic() + 2.0
    while not server_conns and time.monotonic() < deadline:
        time.sleep(0.01)
    assert server_conns[0].recv_all(2.0) == b"part one part two"
    assert server_conns[0].recv(0.1) == b""    # stays at EOF


def test_reset_raises_on_reader():
    phone, watch = mux_pair()
    server_conns = []
    phone.listen(2001, server_conns.append)
    client = watch.connect(2001, timeout=2.0)
    client.reset()
    import time
    deadline = time.monotonic() + 2.0
    while not server_conns and time.monotonic() < deadline:
        time.sleep(0.01)
    with pytest.raises(MuxClosed):
        server_conns[0].recv(2.0)
    with pytest.raises(MuxClosed):
        client.send(b"after reset")


def test_many_interleaved_connections():
    phone, watch = mux_pair()
    echoes = []

    def echo(conn):
        def run():
            data = conn.recv(2.0)
            conn.send(data.upper())
            echoes.append(data)
        threading.Thread(target=run).start()

    phone.listen(3000, echo)
    clients = [watch.connect(3000, timeout=2.0) for _ in range(10)]
    for i, client in enumerate(clients):
        client.send(b"msg-%d" % i)
    for i, client in enumerate(clients):
        assert client.recv(2.0) == b"MSG-%d" % i
    assert len({c.conn_id for c in clients}) == 10
