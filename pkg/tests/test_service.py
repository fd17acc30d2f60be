import asyncio
import json
import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoia.authenticator import BehaviorSample, Smoothing, build_window
from echoia.control import EngineConfig
from echoia.features import SENSITIVE_FEATURES, FeatureCatalog, PersonalFeatureSet
from echoia.service import (
    MalformedMessage,
    RecordStore,
    Service,
    ServiceConfig,
    TimestampRegression,
    UnhashedSensitiveField,
    UnknownDevice,
    WireMessage,
    decode,
    encode,
    serve,
)

from .oracles import LockFsmOracle

CAT = FeatureCatalog.default()
PLAIN = [f for f in CAT.features if f not in SENSITIVE_FEATURES]
ALL = PersonalFeatureSet(CAT.candidates, CAT.reserved, 0)


def readings(rng, centre):
    return {f: [float(v) for v in rng.normal(centre, 1.0, CAT.dims[f])] for f in PLAIN}


def batch(rng, t0, n, centre):
    return [{"timestamp": t0 + 1000 * i, "readings": readings(rng, centre)} for i in range(n)]


def impostor_windows(n=20, centre=6.0):
    rng = np.random.default_rng(99)
    out = []
    for i in range(n):
        samples = [BehaviorSample("bg", 1000 * j, {f: tuple(v) for f, v in readings(rng, centre).items()}) for j in range(30)]
        out.append(build_window(samples, ALL, CAT, i))
    return out


def small_config(**kw):
    engine = EngineConfig(smoothing=Smoothing(1, 1), grid_c=(1.0,), grid_delta=(1.0,), folds=2)
    return ServiceConfig(engine=engine, enroll_windows=kw.pop("enroll_windows", 12), **kw)


class Client:
    def __init__(self, service, device):
        self.service, self.device = service, device
        self.conn = service.connect()
        self.seq = 0
        self.sent: list[str] = []

    def send(self, kind, **payload):
        self.seq += 1
        line = encode(WireMessage(kind, self.seq, self.device, payload))
        self.sent.append(line)
        return [decode(r) for r in self.service.handle_line(self.conn, line)]


def enrolled(service, device="dev-a", seed=0):
    c = Client(service, device)
    assert c.send("HELLO")[0].type == "RANK_REQUEST"
    ranks = {f: i + 1 for i, f in enumerate(CAT.candidates)}
    assert c.send("RANK_RESPONSE", ranks=ranks)[0].type == "FEATURE_SET_UPDATE"
    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(4):
        c.send("SAMPLE_BATCH", samples=batch(rng, t, 60, 0.0))
        t += 60_000
    assert service.engines[device].model is not None
    return c, rng, t


# -- wire ---------------------------------------------------------------------


def test_decode_rejects_garbage():
    for bad in ["nope", "[]", '{"seq": 1}', '{"type": "HELLO", "seq": "1"}', '{"type": "HELLO", "seq": true}']:
        with pytest.raises(MalformedMessage):
            decode(bad)


def test_encode_rejects_reserved_payload_keys():
    with pytest.raises(MalformedMessage):
        encode(WireMessage("HELLO", 1, "d", {"seq": 3}))


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**53), 2**53) | st.floats(allow_nan=False, allow_infinity=False) | st.text(),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=12,
)
payloads = st.dictionaries(st.text(max_size=8).filter(lambda k: k not in ("type", "seq", "device_id")), json_values, max_size=5)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["HELLO", "SAMPLE_BATCH", "PIN_RESPONSE", "X"]), st.integers(0, 2**40), st.text(string.ascii_letters, max_size=19), payloads)
def test_wire_round_trip(kind, seq, device, payload):
    msg = WireMessage(kind, seq, device, payload)
    assert decode(encode(msg)) == msg
    assert "\n" not in encode(msg)


# -- dispatch -----------------------------------------------------------------


def test_messages_before_hello_close_the_connection():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    reply = c.send("SAMPLE_BATCH", samples=[])
    assert reply[0].type == "ERROR" and reply[0].payload["code"] == "ProtocolViolation"
    assert c.conn.closed and c.send("HELLO") == []


def test_unknown_type_and_malformed_line():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    c.send("HELLO")
    assert c.send("FROBNICATE")[0].payload["code"] == "UnknownType"
    out = decode(svc.handle_line(c.conn, "{not json")[0])
    assert out.type == "ERROR" and out.payload["code"] == "MalformedPayload"
    assert not c.conn.closed


def test_sequence_numbers_must_increase():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    c.send("HELLO")
    c.seq = 0
    assert c.send("RANK_RESPONSE", ranks={})[0].payload["code"] == "ProtocolViolation"


def test_malformed_ranking_is_reported():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    c.send("HELLO")
    reply = c.send("RANK_RESPONSE", ranks={"gps": 1})
    assert reply[0].payload["code"] == "MalformedPayload"


def test_samples_before_ranking_are_invalid():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    c.send("HELLO")
    assert c.send("SAMPLE_BATCH", samples=[])[0].payload["code"] == "InvalidState"


def test_password_while_unlocked_is_invalid_state():
    svc = Service(CAT, small_config(), background=impostor_windows())
    c, _, t = enrolled(svc)
    assert c.send("PASSWORD_EVENT", correct=True, timestamp=t)[0].payload["code"] == "InvalidState"


def test_batch_size_limit():
    svc = Service(CAT, small_config(max_batch=5))
    c = Client(svc, "dev")
    c.send("HELLO")
    c.send("RANK_RESPONSE", ranks={f: i + 1 for i, f in enumerate(CAT.candidates)})
    reply = c.send("SAMPLE_BATCH", samples=batch(np.random.default_rng(0), 0, 6, 0.0))
    assert reply[0].payload["code"] == "MalformedPayload"


# -- store --------------------------------------------------------------------


def test_persist_rejects_time_regression_and_plain_sensitive_fields():
    store = RecordStore(None)
    store.persist("d", {"kind": "sample", "timestamp": 10, "readings": {"light": [1.0]}})
    store.persist("d", {"kind": "sample", "timestamp": 10, "readings": {"light": [1.0]}})
    with pytest.raises(TimestampRegression):
        store.persist("d", {"kind": "sample", "timestamp": 9, "readings": {}})
    with pytest.raises(UnhashedSensitiveField):
        store.persist("d", {"kind": "sample", "timestamp": 11, "readings": {"gps": [1.0, 2.0, 3.0]}})
    store.persist("d", {"kind": "sample", "timestamp": 11, "readings": {"gps": [1.0, 2.0, 3.0]}, "hashed": ["gps"]})
    assert len(store.query_range("d", 0, 100)) == 3


def test_service_reports_unhashed_gps():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    c.send("HELLO")
    c.send("RANK_RESPONSE", ranks={f: i + 1 for i, f in enumerate(CAT.candidates)})
    reply = c.send("SAMPLE_BATCH", samples=[{"timestamp": 0, "readings": {"gps": [1.0, 2.0, 3.0]}}])
    assert reply[0].payload["code"] == "UnhashedSensitiveField"
    assert svc.store.last_timestamp("dev") is None


def test_batch_with_regression_is_rejected_whole():
    svc = Service(CAT, small_config())
    c = Client(svc, "dev")
    c.send("HELLO")
    c.send("RANK_RESPONSE", ranks={f: i + 1 for i, f in enumerate(CAT.candidates)})
    samples = batch(np.random.default_rng(0), 0, 5, 0.0)
    samples[3]["timestamp"] = -1
    assert c.send("SAMPLE_BATCH", samples=samples)[0].payload["code"] == "TimestampRegression"
    assert svc.store.last_timestamp("dev") is None


def test_query_range_partitions_every_device():
    rng = np.random.default_rng(5)
    store = RecordStore(None)
    truth = {}
    for dev in ("a", "b", "c"):
        ts = np.sort(rng.integers(0, 10_000, size=300))
        truth[dev] = ts.tolist()
        for t in ts:
            store.persist(dev, {"timestamp": int(t), "readings": {}})
    with pytest.raises(UnknownDevice):
        store.query_range("zzz", 0, 1)
    for dev, ts in truth.items():
        for _ in range(50):
            cuts = sorted(rng.integers(-100, 10_100, size=3).tolist())
            # consecutive closed ranges [a, b-1], [b, c] split the same span exactly
            left = store.query_range(dev, cuts[0], cuts[1] - 1) if cuts[1] > cuts[0] else []
            right = store.query_range(dev, cuts[1], cuts[2])
            whole = store.query_range(dev, cuts[0], cuts[2])
            assert left + right == whole
            assert [r["timestamp"] for r in whole] == [t for t in ts if cuts[0] <= t <= cuts[2]]


def test_store_survives_reopen_and_torn_tail(tmp_path):
    store = RecordStore(tmp_path, fsync=True)
    for t in range(50):
        store.persist("dev", {"timestamp": t, "readings": {"light": [float(t)]}})
    before = store.query_range("dev", 0, 100)
    store.close()
    with open(tmp_path / "dev" / "records.log", "a") as fh:
        fh.write('{"timestamp": 50, "readi')
    again = RecordStore(tmp_path)
    assert again.query_range("dev", 0, 100) == before
    assert again.last_timestamp("dev") == 49


# -- behaviour ------------------------------------------------------------------


def test_golden_trace_matches_fsm_oracle():
    svc = Service(CAT, small_config(), background=impostor_windows())
    c, rng, t = enrolled(svc)
    eng = svc.engines["dev-a"]
    cfg = eng.adaptation_config
    oracle = LockFsmOracle(cfg.eta_incorrect, cfg.eta_correct, eng.delta_threshold)

    def intruder_until_locked():
        nonlocal t
        for _ in range(5):
            replies = c.send("SAMPLE_BATCH", samples=batch(rng, t, 60, 6.0))
            t += 60_000
            if any(r.type == "LOCKED" for r in replies):
                assert replies[0].payload["state"] == "locked_awaiting_password"
                oracle.lock()
                return
        raise AssertionError("intruder samples never locked the device")

    def password(ok):
        replies = c.send("PASSWORD_EVENT", correct=ok, timestamp=t)
        assert [r.type for r in replies] == oracle.password(ok)
        return replies

    owner = c.send("SAMPLE_BATCH", samples=batch(rng, t, 60, 0.0))
    t += 60_000
    assert not any(r.type == "LOCKED" for r in owner)
    intruder_until_locked()
    password(False)
    password(True)
    assert eng.session.state.value == oracle.state == "unlocked"
    intruder_until_locked()
    replies = password(True)
    assert oracle.state == "pin_challenge_pending"
    token = replies[-1].payload["token"]
    update = c.send("PIN_RESPONSE", token=token, pin_ok=True, consent=True, timestamp=t)
    assert [r.type for r in update] == oracle.pin(True, True)
    assert update[0].payload["version"] == oracle.version == 2
    assert "previous_top" in update[0].payload and update[0].payload["model_stale"] is False
    kinds = [r["event"] for r in svc.store.query_range("dev-a", 0, t) if r.get("kind") == "event"]
    assert kinds == ["password_incorrect", "password_correct", "password_correct", "pin_correct"]
    assert c.send("SAMPLE_BATCH", samples=batch(rng, t, 60, 0.0))[0].type == "AUTH_RESULT"


def test_wire_log_replay_is_deterministic():
    svc = Service(CAT, small_config(), background=impostor_windows())
    c, rng, t = enrolled(svc)
    for centre in (0.0, 6.0, 6.0, 0.0):
        c.send("SAMPLE_BATCH", samples=batch(rng, t, 60, centre))
        t += 60_000
        if svc.engines["dev-a"].locked:
            c.send("PASSWORD_EVENT", correct=True, timestamp=t)
    replay_svc = Service(CAT, small_config(), background=impostor_windows())
    conn = replay_svc.connect()
    again = Service(CAT, small_config(), background=impostor_windows())
    conn2 = again.connect()
    for line in c.sent:
        a = replay_svc.handle_line(conn, line)
        b = again.handle_line(conn2, line)
        assert a == b
    assert replay_svc.engines["dev-a"].model.dumps() == svc.engines["dev-a"].model.dumps()


def test_devices_are_isolated():
    svc = Service(CAT, small_config(), background=impostor_windows())
    a, rng, t = enrolled(svc, "dev-a")
    b, _, _ = enrolled(svc, "dev-b", seed=1)
    snapshot = svc.engines["dev-b"].model.dumps(), svc.engines["dev-b"].session, svc.engines["dev-b"].features
    for _ in range(5):
        a.send("SAMPLE_BATCH", samples=batch(rng, t, 60, 6.0))
        t += 60_000
        if svc.engines["dev-a"].locked:
            a.send("PASSWORD_EVENT", correct=False, timestamp=t)
    assert svc.engines["dev-a"].locked
    assert (svc.engines["dev-b"].model.dumps(), svc.engines["dev-b"].session, svc.engines["dev-b"].features) == snapshot
    # a connection can never act for another device
    reply = a.send("PASSWORD_EVENT", correct=True, timestamp=t)
    assert reply[0].device_id == "dev-a"
    a.device = "dev-b"
    assert a.send("PASSWORD_EVENT", correct=True, timestamp=t)[0].payload["code"] == "ProtocolViolation"


def test_models_are_snapshotted(tmp_path):
    svc = Service(CAT, small_config(), RecordStore(tmp_path), background=impostor_windows())
    enrolled(svc)
    files = sorted(p.name for p in (tmp_path / "dev-a").iterdir())
    assert "model.v1" in files and "records.log" in files
    assert json.loads((tmp_path / "dev-a" / "model.v1").read_text())["feature_set_version"] == 1


def test_tcp_transport():
    async def session():
        svc = Service(CAT, small_config())
        ready = asyncio.Event()
        task = asyncio.create_task(serve(svc, "127.0.0.1", 0, ready))
        await asyncio.wait_for(ready.wait(), 5)
        host, port = svc.address
        reader, writer = await asyncio.open_connection(host, port)
        writer.write(encode(WireMessage("HELLO", 1, "tcp-dev")).encode() + b"\n")
        await writer.drain()
        first = decode(await asyncio.wait_for(reader.readline(), 5))
        writer.write(b"garbage\n")
        await writer.drain()
        second = decode(await asyncio.wait_for(reader.readline(), 5))
        writer.close()
        task.cancel()
        try:
            await task
        except asyncio.CancelledError:
            pass
        return first, second

    first, second = asyncio.run(session())
    assert first.type == "RANK_REQUEST" and first.device_id == "tcp-dev"
    assert second.type == "ERROR" and second.payload["code"] == "MalformedPayload"
