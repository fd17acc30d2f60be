"""Control server: wire protocol, message dispatch and the per-device record store.

Wire format: one UTF-8 JSON object per line with mandatory ``type`` and
``seq`` keys, an optional ``device_id``, and the payload fields at the top
level. Timestamps are integer milliseconds.
"""

from __future__ import annotations

import asyncio
import bisect
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .adaptation import ChallengeAlreadyPending
from .authenticator import (
    BehaviorSample,
    NotLocked,
    SessionError,
    StreamWindower,
    build_window,
)
from .classifier import ILLEGITIMATE, LEGITIMATE, InsufficientData, WindowVector
from .control import DeviceEngine, EngineConfig
from .features import SENSITIVE_FEATURES, FeatureCatalog, MalformedRanking, PersonalFeatureSet

log = logging.getLogger(__name__)

MESSAGE_TYPES = (
    "HELLO",
    "RANK_REQUEST",
    "RANK_RESPONSE",
    "SAMPLE_BATCH",
    "AUTH_RESULT",
    "LOCKED",
    "PASSWORD_EVENT",
    "PIN_CHALLENGE",
    "PIN_RESPONSE",
    "FEATURE_SET_UPDATE",
    "ERROR",
)
CLIENT_TYPES = frozenset({"HELLO", "RANK_RESPONSE", "SAMPLE_BATCH", "PASSWORD_EVENT", "PIN_RESPONSE"})
HEADER_KEYS = ("type", "seq", "device_id")

_DEVICE_RE = re.compile(r"^[A-Za-z0-9_\-]{1,64}$")


class MalformedMessage(ValueError):
    pass


class ProtocolViolation(RuntimeError):
    pass


class TimestampRegression(ValueError):
    pass


class UnhashedSensitiveField(ValueError):
    pass


class UnknownDevice(KeyError):
    pass


@dataclass(frozen=True)
class WireMessage:
    type: str
    seq: int
    device_id: str = ""
    payload: Mapping = field(default_factory=dict)


def encode(msg: WireMessage) -> str:
    clash = set(HEADER_KEYS) & set(msg.payload)
    if clash:
        raise MalformedMessage(f"payload uses reserved keys {sorted(clash)}")
    obj = {"type": msg.type, "seq": msg.seq, "device_id": msg.device_id, **msg.payload}
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def decode(line: str | bytes) -> WireMessage:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedMessage(f"not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedMessage("message must be an object")
    kind, seq, device = obj.pop("type", None), obj.pop("seq", None), obj.pop("device_id", "")
    if not isinstance(kind, str):
        raise MalformedMessage("missing type")
    if isinstance(seq, bool) or not isinstance(seq, int):
        raise MalformedMessage("seq must be an integer")
    if not isinstance(device, str):
        raise MalformedMessage("device_id must be a string")
    return WireMessage(kind, seq, device, obj)


# -- store --------------------------------------------------------------------


class RecordStore:
    """Append-only, time-ordered records per device.

    With a root directory every append goes to ``<root>/<device>/records.log``
    and is flushed before returning; ``root=None`` keeps everything in memory.
    """

    def __init__(self, root: str | os.PathLike | None = None, fsync: bool = False):
        self.root = Path(root) if root is not None else None
        self.fsync = fsync
        self._records: dict[str, list[dict]] = {}
        self._times: dict[str, list[int]] = {}
        self._handles: dict[str, object] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    def _load(self) -> None:
        for path in sorted(self.root.glob("*/records.log")):
            device = path.parent.name
            recs, times = [], []
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # torn final line from an interrupted write; it was never acknowledged
                        break
                    recs.append(rec)
                    times.append(int(rec["timestamp"]))
            self._records[device] = recs
            self._times[device] = times

    def devices(self) -> list[str]:
        return sorted(self._records)

    def last_timestamp(self, device_id: str) -> int | None:
        times = self._times.get(device_id)
        return times[-1] if times else None

    def check(self, device_id: str, entry: Mapping) -> None:
        ts = int(entry["timestamp"])
        last = self.last_timestamp(device_id)
        if last is not None and ts < last:
            raise TimestampRegression(f"{device_id}: timestamp {ts} precedes {last}")
        readings = entry.get("readings")
        if readings:
            hashed = set(entry.get("hashed", ()))
            plain = sorted(f for f in readings if f in SENSITIVE_FEATURES and f not in hashed)
            if plain:
                raise UnhashedSensitiveField(f"{device_id}: unhashed sensitive fields {plain}")

    def persist(self, device_id: str, entry: Mapping) -> int:
        if not _DEVICE_RE.match(device_id):
            raise ValueError(f"bad device id {device_id!r}")
        self.check(device_id, entry)
        rec = dict(entry)
        recs = self._records.setdefault(device_id, [])
        times = self._times.setdefault(device_id, [])
        if self.root is not None:
            fh = self._handle(device_id)
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        recs.append(rec)
        times.append(int(rec["timestamp"]))
        return len(recs) - 1

    def _handle(self, device_id: str):
        fh = self._handles.get(device_id)
        if fh is None:
            d = self.root / device_id
            d.mkdir(parents=True, exist_ok=True)
            fh = open(d / "records.log", "a", encoding="utf-8")
            self._handles[device_id] = fh
        return fh

    def query_range(self, device_id: str, t0: int, t1: int) -> list[dict]:
        if t0 > t1:
            raise ValueError("t0 must not exceed t1")
        if device_id not in self._records:
            raise UnknownDevice(device_id)
        times = self._times[device_id]
        lo = bisect.bisect_left(times, t0)
        hi = bisect.bisect_right(times, t1)
        return list(self._records[device_id][lo:hi])

    def save_model(self, device_id: str, model, serial: int) -> Path | None:
        if self.root is None:
            return None
        d = self.root / device_id
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"model.v{serial}"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(model.dumps() + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles.clear()


# -- server -------------------------------------------------------------------


@dataclass(frozen=True)
class ServiceConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    enroll_windows: int = 120
    max_batch: int = 256


@dataclass
class Connection:
    device_id: str | None = None
    last_seq: int | None = None
    out_seq: int = 0
    closed: bool = False


def _sample_from_payload(device_id: str, raw, catalog: FeatureCatalog) -> BehaviorSample:
    if not isinstance(raw, dict):
        raise MalformedMessage("sample must be an object")
    ts = raw.get("timestamp")
    readings = raw.get("readings")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise MalformedMessage("sample timestamp must be an integer")
    if not isinstance(readings, dict):
        raise MalformedMessage("sample readings must be an object")
    parsed = {}
    for f, vec in readings.items():
        if f not in catalog.dims:
            raise MalformedMessage(f"unknown feature {f!r}")
        if not isinstance(vec, list) or len(vec) != catalog.dims[f]:
            raise MalformedMessage(f"{f} needs {catalog.dims[f]} values")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in vec):
            raise MalformedMessage(f"{f} values must be numbers")
        parsed[f] = tuple(float(v) for v in vec)
    hashed = raw.get("hashed", [])
    digests = raw.get("digests", {})
    if not isinstance(hashed, list) or not isinstance(digests, dict):
        raise MalformedMessage("hashed must be a list and digests an object")
    return BehaviorSample(device_id, ts, parsed, frozenset(hashed), dict(digests))


class Service:
    """In-process control server; transports call :meth:`handle_message`.

    ``background`` supplies full-layout impostor windows that serve as the
    negative class when a device finishes enrollment. It may be keyed by the
    device the windows came from, in which case a device never enrolls
    against its own windows.
    """

    def __init__(
        self,
        catalog: FeatureCatalog,
        config: ServiceConfig | None = None,
        store: RecordStore | None = None,
        background: Sequence[WindowVector] | Mapping[str, Sequence[WindowVector]] = (),
        adaptive: bool = True,
    ):
        self.catalog = catalog
        self.config = config or ServiceConfig()
        self.store = store or RecordStore(None)
        if not isinstance(background, Mapping):
            background = {"": background}
        self.background = {
            src: [WindowVector(w.values, w.layout, w.window_id, ILLEGITIMATE, w.version, w.timestamp) for w in ws]
            for src, ws in background.items()
        }
        self.adaptive = adaptive
        self.engines: dict[str, DeviceEngine] = {}
        self._windowers: dict[str, StreamWindower] = {}
        self._enroll: dict[str, list[WindowVector]] = {}
        self._saved: dict[str, int] = {}
        self._all = PersonalFeatureSet(catalog.candidates, catalog.reserved, 0)
        self.address: tuple[str, int] | None = None

    def connect(self) -> Connection:
        return Connection()

    def engine(self, device_id: str) -> DeviceEngine:
        eng = self.engines.get(device_id)
        if eng is None:
            eng = DeviceEngine(device_id, self.catalog, self.config.engine, adaptive=self.adaptive)
            self.engines[device_id] = eng
            cfg = self.config.engine
            self._windowers[device_id] = StreamWindower(cfg.window_ms, cfg.hop_ms)
            self._enroll[device_id] = []
        return eng

    def handle_line(self, conn: Connection, line: str) -> list[str]:
        try:
            msg = decode(line)
        except MalformedMessage as exc:
            return [encode(self._error(conn, "MalformedPayload", str(exc)))]
        return [encode(m) for m in self.handle_message(conn, msg)]

    def _reply(self, conn: Connection, kind: str, **payload) -> WireMessage:
        conn.out_seq += 1
        return WireMessage(kind, conn.out_seq, conn.device_id or "", payload)

    def _error(self, conn: Connection, code: str, detail: str, close: bool = False) -> WireMessage:
        if close:
            conn.closed = True
        return self._reply(conn, "ERROR", code=code, detail=detail, close=close)

    def handle_message(self, conn: Connection, msg: WireMessage) -> list[WireMessage]:
        if conn.closed:
            return []
        if conn.last_seq is not None and msg.seq <= conn.last_seq:
            return [self._error(conn, "ProtocolViolation", f"seq {msg.seq} after {conn.last_seq}", close=True)]
        conn.last_seq = msg.seq
        if conn.device_id is None:
            if msg.type != "HELLO":
                return [self._error(conn, "ProtocolViolation", f"{msg.type} before HELLO", close=True)]
            if not _DEVICE_RE.match(msg.device_id):
                return [self._error(conn, "ProtocolViolation", "HELLO needs a valid device_id", close=True)]
            conn.device_id = msg.device_id
            return self._hello(conn)
        if msg.type == "HELLO":
            return [self._error(conn, "ProtocolViolation", "duplicate HELLO", close=True)]
        if msg.device_id and msg.device_id != conn.device_id:
            return [self._error(conn, "ProtocolViolation", "device_id changed mid-connection", close=True)]
        handler = {
            "RANK_RESPONSE": self._rank_response,
            "SAMPLE_BATCH": self._sample_batch,
            "PASSWORD_EVENT": self._password_event,
            "PIN_RESPONSE": self._pin_response,
        }.get(msg.type)
        if handler is None:
            return [self._error(conn, "UnknownType", f"unsupported message type {msg.type!r}")]
        try:
            replies = handler(conn, msg.payload)
        except (MalformedMessage, MalformedRanking) as exc:
            return [self._error(conn, "MalformedPayload", str(exc))]
        except (TimestampRegression, UnhashedSensitiveField) as exc:
            return [self._error(conn, type(exc).__name__, str(exc))]
        except (NotLocked, SessionError, ChallengeAlreadyPending) as exc:
            return [self._error(conn, "InvalidState", str(exc))]
        self._snapshot(conn.device_id)
        return replies

    # -- handlers -------------------------------------------------------

    def _feature_update(self, conn: Connection, eng: DeviceEngine, previous=None) -> WireMessage:
        fs = eng.features
        payload = {"top": list(fs.top), "reserved": list(fs.reserved), "version": fs.version}
        if previous is not None:
            payload["previous_top"] = list(previous.top)
            payload["model_stale"] = eng.stale
        return self._reply(conn, "FEATURE_SET_UPDATE", **payload)

    def _hello(self, conn: Connection) -> list[WireMessage]:
        eng = self.engine(conn.device_id)
        if eng.adaptive and not eng.initialized:
            return [self._reply(conn, "RANK_REQUEST", candidates=list(self.catalog.candidates))]
        return [self._feature_update(conn, eng)]

    def _rank_response(self, conn: Connection, payload) -> list[WireMessage]:
        eng = self.engine(conn.device_id)
        ranks = payload.get("ranks")
        if not isinstance(ranks, dict):
            raise MalformedMessage("ranks must be an object")
        if eng.adaptive and eng.initialized:
            raise SessionError("device already ranked its features")
        eng.rank(ranks)
        return [self._feature_update(conn, eng)]

    def _sample_batch(self, conn: Connection, payload) -> list[WireMessage]:
        device = conn.device_id
        eng = self.engine(device)
        if not eng.initialized:
            raise SessionError("device must answer RANK_REQUEST before sending samples")
        raw = payload.get("samples")
        if not isinstance(raw, list):
            raise MalformedMessage("samples must be a list")
        if len(raw) > self.config.max_batch:
            raise MalformedMessage(f"batch of {len(raw)} exceeds limit {self.config.max_batch}")
        samples = [_sample_from_payload(device, s, self.catalog) for s in raw]
        last = self.store.last_timestamp(device)
        for s in samples:
            entry = {"kind": "sample", **s.to_record()}
            if last is not None and s.timestamp < last:
                raise TimestampRegression(f"{device}: timestamp {s.timestamp} precedes {last}")
            self.store.check(device, entry)
            last = s.timestamp
        decisions, lock = [], None
        windower = self._windowers[device]
        for s in samples:
            self.store.persist(device, {"kind": "sample", **s.to_record()})
            for window_id, _start, members in windower.push(s):
                window = build_window(members, self._all, self.catalog, window_id)
                decision = self._window(eng, window)
                if decision is not None:
                    decisions.append(
                        {
                            "window_id": decision.window_id,
                            "timestamp": decision.timestamp,
                            "score": decision.score,
                            "label": decision.label,
                            "smoothed_label": decision.smoothed_label,
                            "acted": decision.acted,
                        }
                    )
                    if decision.acted:
                        lock = decision
        replies = [
            self._reply(
                conn,
                "AUTH_RESULT",
                decisions=decisions,
                state=eng.session.state.value,
                enrolled=eng.model is not None,
            )
        ]
        if lock is not None:
            replies.append(self._reply(conn, "LOCKED", window_id=lock.window_id, timestamp=lock.timestamp))
        return replies

    def _window(self, eng: DeviceEngine, window: WindowVector):
        if eng.model is None:
            pool = self._enroll[eng.device_id]
            pool.append(WindowVector(window.values, window.layout, window.window_id, LEGITIMATE, 0, window.timestamp))
            negatives = [w for src, ws in self.background.items() if src != eng.device_id for w in ws]
            if len(pool) >= self.config.enroll_windows and negatives:
                try:
                    eng.fit(_interleave(pool, negatives))
                except InsufficientData as exc:
                    log.warning("%s: enrollment deferred: %s", eng.device_id, exc)
            return None
        return eng.observe(window)

    def _event_time(self, device: str, ts: int) -> int:
        last = self.store.last_timestamp(device)
        return ts if last is None else max(ts, last)

    def _password_event(self, conn: Connection, payload) -> list[WireMessage]:
        device = conn.device_id
        eng = self.engine(device)
        correct = payload.get("correct")
        ts = payload.get("timestamp")
        if not isinstance(correct, bool):
            raise MalformedMessage("correct must be a boolean")
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise MalformedMessage("timestamp must be an integer")
        event, token = eng.password(correct, ts)
        self.store.persist(
            device,
            {"kind": "event", "timestamp": self._event_time(device, ts), "event": event.kind.value, "event_time": event.timestamp},
        )
        if not correct:
            return [self._reply(conn, "LOCKED", window_id=None, timestamp=event.timestamp)]
        replies = [self._reply(conn, "AUTH_RESULT", decisions=[], state=eng.session.state.value, enrolled=eng.model is not None)]
        if token is not None:
            replies.append(self._reply(conn, "PIN_CHALLENGE", token=token.token, expires_at=token.expires_at))
        return replies

    def _pin_response(self, conn: Connection, payload) -> list[WireMessage]:
        device = conn.device_id
        eng = self.engine(device)
        token, pin_ok, consent, ts = (payload.get(k) for k in ("token", "pin_ok", "consent", "timestamp"))
        if not isinstance(token, str):
            raise MalformedMessage("token must be a string")
        if not isinstance(pin_ok, bool) or not isinstance(consent, bool):
            raise MalformedMessage("pin_ok and consent must be booleans")
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise MalformedMessage("timestamp must be an integer")
        previous = eng.features
        refreshed = eng.pin(token, pin_ok, consent, ts)
        self.store.persist(
            device,
            {"kind": "event", "timestamp": self._event_time(device, ts), "event": eng.events[-1].kind.value, "event_time": ts},
        )
        if refreshed is not None:
            return [self._feature_update(conn, eng, previous)]
        return [self._reply(conn, "AUTH_RESULT", decisions=[], state=eng.session.state.value, enrolled=eng.model is not None)]

    def _snapshot(self, device: str) -> None:
        eng = self.engines.get(device)
        if eng is None or eng.model is None:
            return
        if self._saved.get(device) != eng.retrain_count:
            self.store.save_model(device, eng.model, eng.retrain_count)
            self._saved[device] = eng.retrain_count


def _interleave(owner: Sequence[WindowVector], others: Sequence[WindowVector]) -> list[WindowVector]:
    """Spread ``others`` evenly through ``owner`` so temporal folds see both classes."""
    n, m = len(owner), len(others)
    keyed = [((i + 0.5) / n, 0, i, w) for i, w in enumerate(owner)]
    keyed += [((j + 0.5) / m, 1, j, w) for j, w in enumerate(others)]
    keyed.sort(key=lambda t: t[:3])
    out = []
    for pos, (_, _, _, w) in enumerate(keyed):
        out.append(WindowVector(w.values, w.layout, pos, w.label, w.version, w.timestamp))
    return out


# -- TCP transport --------------------------------------------------------------


async def serve(service: Service, host: str = "127.0.0.1", port: int = 7878, ready: asyncio.Event | None = None):
    """Run the line protocol over TCP until cancelled.

    Work for a device is serialised with a per-device lock, so concurrent
    connections for the same device are processed in arrival order.
    """
    locks: dict[str, asyncio.Lock] = {}

    async def client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        conn = service.connect()
        try:
            while not conn.closed:
                line = await reader.readline()
                if not line:
                    break
                try:
                    msg = decode(line)
                except MalformedMessage as exc:
                    out = [encode(service._error(conn, "MalformedPayload", str(exc)))]
                else:
                    key = conn.device_id or msg.device_id or ""
                    lock = locks.setdefault(key, asyncio.Lock())
                    async with lock:
                        out = [encode(m) for m in service.handle_message(conn, msg)]
                for text in out:
                    writer.write(text.encode("utf-8") + b"\n")
                await writer.drain()
        finally:
            writer.close()

    server = await asyncio.start_server(client, host, port)
    service.address = server.sockets[0].getsockname()[:2]
    if ready is not None:
        ready.set()
    async with server:
        await server.serve_forever()
