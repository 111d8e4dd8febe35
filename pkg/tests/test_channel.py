import socket
import threading

import pytest

from fedgbm.errors import ConfigMismatchError, ProtocolError, SecurityAbort, TransportError
from fedgbm.metrics import RECV, SENT, PayloadCounter
from fedgbm.protocol.channel import (LoopbackChannel, TcpChannel, parse_address,
                                     read_transcript)
from fedgbm.protocol.frames import Frame, MsgType, encode_message


def test_loopback_roundtrip():
    a, b = LoopbackChannel.pair(timeout=5)
    a.send_message(MsgType.HELLO, {"x": 1}, blob=b"\x00\x01")
    meta, sec = b.recv_message(MsgType.HELLO)
    assert meta == {"x": 1} and sec == {"blob": b"\x00\x01"}


def test_unexpected_type_is_protocol_error():
    a, b = LoopbackChannel.pair(timeout=5)
    a.send(MsgType.PARTITION, b"")
    with pytest.raises(ProtocolError, match="expected HELLO"):
        b.recv(MsgType.HELLO)


@pytest.mark.parametrize("code, exc", [("CONFIG_MISMATCH", ConfigMismatchError),
                                       ("REPLAY", SecurityAbort), ("VERSION", ProtocolError),
                                       ("whatever", ProtocolError)])
def test_abort_maps_to_exception(code, exc):
    a, b = LoopbackChannel.pair(timeout=5)
    a.abort(code, "because")
    with pytest.raises(exc):
        b.recv(MsgType.HELLO)


def test_peer_close_and_timeout():
    a, b = LoopbackChannel.pair(timeout=0.05)
    with pytest.raises(TransportError, match="timed out"):
        b.recv()
    a.close()
    with pytest.raises(TransportError, match="closed"):
        b.recv()
    with pytest.raises(TransportError):
        a.send(MsgType.HELLO)


def test_injected_fault():
    a, _ = LoopbackChannel.pair()
    a.fail_after = 1
    a.send(MsgType.HELLO)
    with pytest.raises(TransportError, match="injected"):
        a.send(MsgType.HELLO)


def test_counter_conservation_and_iterations():
    a, b = LoopbackChannel.pair(timeout=5)
    a.send_message(MsgType.HELLO, {})
    b.recv()
    for k in (1, 2):
        a.send_message(MsgType.BATCH_ANNOUNCE, {"k": k})
        a.send_message(MsgType.ENC_GRADIENTS, {}, g=b"\x00" * (100 * k))
        b.recv()
        b.recv()
        b.send_message(MsgType.SPLIT_CANDIDATES, {})
        a.recv()
    assert a.counter.per_iteration(SENT) == b.counter.per_iteration(RECV)
    assert b.counter.per_iteration(SENT) == a.counter.per_iteration(RECV)
    assert a.counter.bytes_sent == b.counter.bytes_received
    # by-type totals add up to the frame total
    assert sum(a.counter.by_type(SENT).values()) == a.counter.bytes_sent
    assert a.counter.frame_counts(2, SENT) == {"BATCH_ANNOUNCE": 1, "ENC_GRADIENTS": 1}
    assert set(a.counter.per_iteration()) == {0, 1, 2}


def test_counter_counts_whole_frames():
    c = PayloadCounter()
    f = Frame(MsgType.HELLO, encode_message({"a": 1}))
    c.record(SENT, f)
    assert c.bytes_sent == len(f.encode())


def test_transcript_records_both_directions(tmp_path):
    a, b = LoopbackChannel.pair(tmp_path / "a.t", tmp_path / "b.t", timeout=5)
    a.send_message(MsgType.HELLO, {"hi": 1})
    b.recv()
    b.send_message(MsgType.HELLO, {"hi": 2})
    a.recv()
    a.close()
    b.close()
    ta = read_transcript(tmp_path / "a.t")
    assert [(d, f.msg_type) for d, f in ta] == [(SENT, MsgType.HELLO), (RECV, MsgType.HELLO)]
    tb = read_transcript(tmp_path / "b.t")
    assert ta[0][1] == tb[0][1]


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_tcp_roundtrip():
    port = _free_port()
    got = {}

    def server():
        with TcpChannel.listen("127.0.0.1", port, timeout=10) as ch:
            meta, sec = ch.recv_message(MsgType.PSI_OFFER)
            ch.send_message(MsgType.PSI_REPLY, meta, **sec)
            got["b"] = ch.counter.bytes_received

    th = threading.Thread(target=server)
    th.start()
    big = bytes(range(256)) * 5000
    with TcpChannel.connect("127.0.0.1", port, timeout=10) as ch:
        ch.send_message(MsgType.PSI_OFFER, {"n": 3}, points=big)
        meta, sec = ch.recv_message(MsgType.PSI_REPLY)
        sent = ch.counter.bytes_sent
    th.join()
    assert meta == {"n": 3} and sec["points"] == big
    assert got["b"] == sent


def test_tcp_connect_failure_is_transport_error():
    with pytest.raises(TransportError):
        TcpChannel.connect("127.0.0.1", _free_port(), retry_s=0.2)


@pytest.mark.parametrize("addr", ["localhost", "host:", ":80", "h:port"])
def test_parse_address_rejects(addr):
    with pytest.raises(TransportError):
        parse_address(addr)


def test_parse_address():
    assert parse_address("127.0.0.1:9000") == ("127.0.0.1", 9000)
