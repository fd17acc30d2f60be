"""Synthetic behavioural corpora and scripted people.

Every user gets Gaussian behaviour per feature. A small planted subset of
candidate features sits ``separation`` standard deviations away from the
population mean along a random direction; everything else matches the
population. Each device belongs to one owner and is periodically picked up
by one intruder (another user).

Within a stream, a latent behaviour state is drawn once per block and the
individual 1 Hz samples jitter around it, so a window's mean is noisy at
the block level rather than averaging the noise away.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .authenticator import BehaviorSample, full_layout, window_matrix
from .classifier import ILLEGITIMATE, LEGITIMATE, WindowVector
from .control import FeedbackPolicy
from .features import SENSITIVE_FEATURES, FeatureCatalog
from .service import RecordStore, Service, ServiceConfig, WireMessage, decode, encode

EPOCH_MS = 1_600_000_000_000
_ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class DriftSpec:
    """Corpus-wide drift recipe.

    ``kind="noise"`` picks ``n_features`` non-planted candidates that carry a
    secondary owner signal (``secondary`` times the separation) until onset,
    after which they fall back to the population mean with their spread
    inflated by ``scale``. ``kind="planted"`` pulls every planted feature back
    to the population mean. Onset is a fraction of the timeline.
    """

    kind: str = "none"
    onset: float = 0.3
    n_features: int = 4
    scale: float = 8.0
    secondary: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "noise", "planted"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if not 0 <= self.onset <= 1:
            raise ValueError("drift onset is a fraction of the timeline")


@dataclass(frozen=True)
class Drift:
    onset_ms: int
    features: tuple[str, ...]
    mean_scale: float = 1.0
    std_scale: float = 1.0


@dataclass(frozen=True)
class GenParams:
    seed: int = 0
    n_users: int = 17
    duration_s: int = 4 * 3600
    separation: float = 3.0
    k: int = 5
    rate_hz: float = 1.0
    block_s: int = 15
    jitter: float = 0.5
    reserved_separation: float = 0.5  # as a fraction of ``separation``
    intruder_fraction: float = 0.11
    episodes: int = 10
    rank_noise: float = 0.35
    lead_in_s: int = 0
    drift: DriftSpec = field(default_factory=DriftSpec)

    def __post_init__(self):
        if self.separation < 0:
            raise ValueError("separation must be non-negative")
        if self.n_users < 1:
            raise ValueError("need at least one user")
        if self.n_users > 1 and self.intruder_fraction < 0.10:
            raise ValueError("intruders must hold the device for at least 10% of the time")


@dataclass
class UserProfile:
    user_id: str
    means: dict[str, np.ndarray]
    scales: dict[str, float]
    planted: tuple[str, ...]
    ranking: dict[str, int]
    drift: Drift | None = None

    def params_at(self, feature: str, drifted: bool) -> tuple[np.ndarray, float]:
        mean, scale = self.means[feature], self.scales[feature]
        if drifted and self.drift is not None and feature in self.drift.features:
            return mean * self.drift.mean_scale, scale * self.drift.std_scale
        return mean, scale


@dataclass(frozen=True)
class SessionScript:
    """Who holds a device when, and how people answer prompts."""

    device_id: str
    segments: tuple[tuple[int, int, str], ...]  # (start_ms, end_ms, holder) covering the timeline
    owner: str
    ranking: Mapping[str, int]
    policy: FeedbackPolicy = field(default_factory=FeedbackPolicy)

    def holder_at(self, ts: np.ndarray | int):
        starts = np.array([s for s, _, _ in self.segments])
        idx = np.searchsorted(starts, ts, side="right") - 1
        names = np.array([h for _, _, h in self.segments])
        return names[np.clip(idx, 0, len(names) - 1)]

    def owner_at(self, ts) -> np.ndarray:
        return self.holder_at(ts) == self.owner

    def intruder_fraction(self) -> float:
        total = self.segments[-1][1] - self.segments[0][0]
        intr = sum(e - s for s, e, h in self.segments if h != self.owner)
        return intr / total if total else 0.0


@dataclass
class DeviceData:
    device_id: str
    timestamps: np.ndarray
    values: dict[str, np.ndarray]


@dataclass
class DeviceTruth:
    device_id: str
    owner: str
    intruder: str | None
    planted: tuple[str, ...]
    drift: Drift | None
    segments: tuple[tuple[int, int, str], ...]

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["segments"] = [list(s) for s in self.segments]
        return doc


@dataclass
class Corpus:
    catalog: FeatureCatalog
    params: GenParams
    devices: list[DeviceData]
    truth: dict[str, DeviceTruth]
    scripts: dict[str, SessionScript]

    def device(self, device_id: str) -> DeviceData:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    def summary(self, window_ms: int = 30_000, hop_ms: int = 15_000) -> dict:
        windows = 0
        for d in self.devices:
            span = int(d.timestamps[-1] - d.timestamps[0])
            windows += max(0, (span - window_ms) // hop_ms + 1)
        fracs = [s.intruder_fraction() for s in self.scripts.values()]
        return {
            "users": len(self.devices),
            "samples": int(sum(len(d.timestamps) for d in self.devices)),
            "windows": int(windows),
            "intruder_fraction": min(fracs) if fracs else 0.0,
            "null_separability": self.params.separation == 0,
            "drift": self.params.drift.kind,
        }


def device_key(seed: int, index: int) -> str:
    """19-character base62 device identifier."""
    digest = int.from_bytes(hashlib.sha256(f"device:{seed}:{index}".encode()).digest(), "big")
    out = []
    for _ in range(19):
        digest, r = divmod(digest, 62)
        out.append(_ALPHABET[r])
    return "".join(out)


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def make_profile(
    user_index: int, params: GenParams, catalog: FeatureCatalog, duration_ms: int
) -> UserProfile:
    rng = np.random.default_rng([params.seed, 1, user_index])
    candidates = list(catalog.candidates)
    k = min(params.k, len(candidates))
    planted = tuple(catalog.ordered(rng.choice(candidates, size=k, replace=False).tolist()))
    means, scales = {}, {}
    for f in catalog.features:
        d = catalog.dims[f]
        direction = _unit(rng, d)
        if f in planted:
            means[f] = params.separation * direction
        elif f in catalog.reserved:
            means[f] = params.reserved_separation * params.separation * direction
        else:
            means[f] = np.zeros(d)
        scales[f] = 1.0
    noise = rng.normal(0.0, params.rank_noise, size=len(candidates))
    score = np.array([1.0 if f in planted else 0.0 for f in candidates]) + noise
    order = sorted(range(len(candidates)), key=lambda i: (-score[i], i))
    ranking = {candidates[i]: r + 1 for r, i in enumerate(order)}
    drift = None
    spec = params.drift
    if spec.kind != "none":
        onset = EPOCH_MS + int(spec.onset * duration_ms)
        if spec.kind == "noise":
            pool = [f for f in candidates if f not in planted]
            chosen = rng.choice(pool, size=min(spec.n_features, len(pool)), replace=False).tolist()
            for f in chosen:
                means[f] = spec.secondary * params.separation * _unit(rng, catalog.dims[f])
            drift = Drift(onset, catalog.ordered(chosen), 0.0, spec.scale)
        else:
            drift = Drift(onset, planted, 0.0, 1.0)
    return UserProfile(f"user{user_index + 1:02d}", means, scales, planted, ranking, drift)


def _episodes(params: GenParams, n_blocks: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Intruder block ranges, one per equal slice of the time after the lead-in.

    Episode length is sized against the whole timeline so the intruder share
    does not shrink when an owner-only lead-in is requested.
    """
    lead = min(int(math.ceil(params.lead_in_s / params.block_s)), n_blocks)
    length = int(math.ceil(params.intruder_fraction * n_blocks / params.episodes))
    span = n_blocks - lead
    if length == 0 or span < params.episodes * length:
        raise ValueError("timeline too short for the requested intruder schedule")
    out = []
    for p in range(params.episodes):
        lo = lead + p * span // params.episodes
        hi = lead + (p + 1) * span // params.episodes
        start = int(rng.integers(lo, hi - length + 1))
        out.append((start, start + length))
    return out


def gen_corpus(params: GenParams, catalog: FeatureCatalog | None = None) -> Corpus:
    catalog = catalog or FeatureCatalog.default()
    duration_ms = int(params.duration_s * 1000)
    profiles = [make_profile(u, params, catalog, duration_ms) for u in range(params.n_users)]
    per_block = int(round(params.block_s * params.rate_hz))
    n = int(round(params.duration_s * params.rate_hz))
    n_blocks = int(math.ceil(n / per_block))
    step_ms = 1000.0 / params.rate_hz
    times = EPOCH_MS + np.round(np.arange(n) * step_ms).astype(np.int64)
    block_of = np.arange(n) // per_block
    block_ms = int(round(params.block_s * 1000))
    block_start = EPOCH_MS + block_ms * np.arange(n_blocks, dtype=np.int64)
    end_ms = int(times[-1]) + int(round(step_ms))

    devices, truth, scripts = [], {}, {}
    for u, owner in enumerate(profiles):
        rng = np.random.default_rng([params.seed, 2, u])
        device_id = device_key(params.seed, u)
        holder = np.full(n_blocks, -1)
        intruder = None
        if params.n_users > 1:
            other = int(rng.integers(params.n_users - 1))
            intruder = profiles[other if other < u else other + 1]
            for a, b in _episodes(params, n_blocks, rng):
                holder[a:b] = 1
        values = {}
        drifted = np.zeros(n_blocks, dtype=bool)
        if owner.drift is not None:
            drifted = block_start >= owner.drift.onset_ms
        for f in catalog.features:
            d = catalog.dims[f]
            mean = np.empty((n_blocks, d))
            scale = np.empty(n_blocks)
            for is_drift in (False, True):
                m, s = owner.params_at(f, is_drift)
                sel = (holder < 0) & (drifted == is_drift)
                mean[sel], scale[sel] = m, s
            if intruder is not None:
                m, s = intruder.params_at(f, False)
                mean[holder > 0], scale[holder > 0] = m, s
            latent = mean + scale[:, None] * rng.standard_normal((n_blocks, d))
            jitter = params.jitter * scale[block_of, None] * rng.standard_normal((n, d))
            values[f] = latent[block_of] + jitter
        devices.append(DeviceData(device_id, times, values))

        segments, cur, start = [], None, 0
        for b in range(n_blocks):
            who = owner.user_id if holder[b] < 0 else intruder.user_id
            if who != cur:
                if cur is not None:
                    segments.append((int(block_start[start]), int(block_start[b]), cur))
                cur, start = who, b
        segments.append((int(block_start[start]), end_ms, cur))
        segments = tuple(segments)
        truth[device_id] = DeviceTruth(
            device_id, owner.user_id, intruder.user_id if intruder else None, owner.planted, owner.drift, segments
        )
        scripts[device_id] = SessionScript(device_id, segments, owner.user_id, dict(owner.ranking))
    return Corpus(catalog, params, devices, truth, scripts)


# -- windows ------------------------------------------------------------------


def device_windows(
    device: DeviceData, script: SessionScript, catalog: FeatureCatalog, window_ms: int, hop_ms: int
) -> tuple[list[WindowVector], np.ndarray]:
    """Full-layout windows for a device plus who held it at each window's end."""
    matrix, starts, last = window_matrix(device.timestamps, device.values, catalog, window_ms, hop_ms)
    layout = full_layout(catalog)
    keep = last >= 0
    windows = [
        WindowVector(matrix[i], layout, int(i), None, 0, int(last[i])) for i in np.flatnonzero(keep)
    ]
    owner = script.owner_at(last[keep])
    for w, is_owner in zip(windows, owner):
        w.label = LEGITIMATE if is_owner else ILLEGITIMATE
    return windows, np.asarray(owner, dtype=bool)


# -- samples and hashing --------------------------------------------------------


def hash_reading(salt: str, device_id: str, timestamp: int, feature: str, values) -> str:
    payload = f"{salt}|{device_id}|{timestamp}|{feature}|" + ",".join(repr(float(v)) for v in values)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def iter_samples(
    device: DeviceData, catalog: FeatureCatalog, salt: str = "echoia", start: int = 0, stop: int | None = None
) -> Iterator[BehaviorSample]:
    stop = len(device.timestamps) if stop is None else stop
    for i in range(start, stop):
        ts = int(device.timestamps[i])
        readings = {}
        for f in catalog.features:
            row = device.values[f][i]
            if not np.isnan(row[0]):
                readings[f] = tuple(float(v) for v in row)
        sensitive = [f for f in readings if f in SENSITIVE_FEATURES]
        digests = {f: hash_reading(salt, device.device_id, ts, f, readings[f]) for f in sensitive}
        yield BehaviorSample(device.device_id, ts, readings, frozenset(sensitive), digests)


# -- persistence ----------------------------------------------------------------


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike, salt: str = "echoia") -> Path:
    """Device streams go under ``devices/``; ground truth lives apart under ``truth/``."""
    out = Path(out_dir)
    store = RecordStore(out / "devices")
    try:
        for d in corpus.devices:
            if store.last_timestamp(d.device_id) is not None:
                raise FileExistsError(f"{out / 'devices' / d.device_id} already holds records")
            for s in iter_samples(d, corpus.catalog, salt):
                store.persist(d.device_id, {"kind": "sample", **s.to_record()})
    finally:
        store.close()
    meta = {
        "catalog": corpus.catalog.to_mapping(),
        "params": _params_doc(corpus.params),
        "devices": [d.device_id for d in corpus.devices],
    }
    (out / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    gt = {k: v.to_document() for k, v in corpus.truth.items()}
    (out / "truth").mkdir(exist_ok=True)
    (out / "truth" / "ground_truth.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n")
    sc = {
        k: {"segments": [list(x) for x in v.segments], "owner": v.owner, "ranking": dict(v.ranking)}
        for k, v in corpus.scripts.items()
    }
    (out / "scripts.json").write_text(json.dumps(sc, indent=1, sort_keys=True) + "\n")
    return out


def _params_doc(params: GenParams) -> dict:
    doc = asdict(params)
    return doc


def read_corpus(path: str | os.PathLike) -> Corpus:
    root = Path(path)
    meta_path = root / "corpus.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no corpus at {root} (missing {meta_path})")
    meta = json.loads(meta_path.read_text())
    catalog = FeatureCatalog.from_mapping(meta["catalog"])
    pdoc = dict(meta["params"])
    pdoc["drift"] = DriftSpec(**pdoc["drift"])
    params = GenParams(**pdoc)
    gt = json.loads((root / "truth" / "ground_truth.json").read_text())
    sc = json.loads((root / "scripts.json").read_text())
    devices, truth, scripts = [], {}, {}
    for device_id in meta["devices"]:
        log_path = root / "devices" / device_id / "records.log"
        if not log_path.exists():
            raise FileNotFoundError(f"missing device stream {log_path}")
        ts, cols = [], {f: [] for f in catalog.features}
        with open(log_path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec.get("kind") != "sample":
                    continue
                ts.append(rec["timestamp"])
                r = rec["readings"]
                for f in catalog.features:
                    cols[f].append(r.get(f, [math.nan] * catalog.dims[f]))
        values = {f: np.asarray(cols[f], dtype=float).reshape(len(ts), catalog.dims[f]) for f in catalog.features}
        devices.append(DeviceData(device_id, np.asarray(ts, dtype=np.int64), values))
        g = gt[device_id]
        drift = Drift(**{**g["drift"], "features": tuple(g["drift"]["features"])}) if g["drift"] else None
        segs = tuple(tuple(s) for s in g["segments"])
        truth[device_id] = DeviceTruth(device_id, g["owner"], g["intruder"], tuple(g["planted"]), drift, segs)
        s = sc[device_id]
        scripts[device_id] = SessionScript(
            device_id, tuple(tuple(x) for x in s["segments"]), s["owner"], dict(s["ranking"])
        )
    return Corpus(catalog, params, devices, truth, scripts)


# -- closed loop through the service ------------------------------------------------


@dataclass
class SessionLog:
    device_id: str
    wire: list[tuple[str, str]] = field(default_factory=list)  # (direction, encoded line)
    decisions: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    locks: list[int] = field(default_factory=list)
    challenges: list[int] = field(default_factory=list)
    feature_updates: list[dict] = field(default_factory=list)
    aborted: str | None = None
    stopped: str | None = None

    def write(self, out_dir: str | os.PathLike) -> Path:
        """Write ``wire.log``, ``decisions.log``, ``events.log`` and ``session.json`` under ``out_dir/<device>``."""
        root = Path(out_dir) / self.device_id
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "wire.log", "w", encoding="utf-8") as fh:
            for direction, line in self.wire:
                fh.write(f"{direction} {line}\n")
        for name, rows in (("decisions.log", self.decisions), ("events.log", self.events)):
            with open(root / name, "w", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
        summary = {
            "device_id": self.device_id,
            "locks": self.locks,
            "challenges": self.challenges,
            "feature_updates": self.feature_updates,
            "aborted": self.aborted,
            "stopped": self.stopped,
        }
        (root / "session.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return root


class _Client:
    def __init__(self, service: Service, device_id: str, log: SessionLog):
        self.service = service
        self.conn = service.connect()
        self.device_id = device_id
        self.seq = 0
        self.log = log

    def send(self, kind: str, **payload) -> list[WireMessage]:
        self.seq += 1
        line = encode(WireMessage(kind, self.seq, self.device_id, payload))
        self.log.wire.append(("out", line))
        replies = []
        for text in self.service.handle_line(self.conn, line):
            self.log.wire.append(("in", text))
            msg = decode(text)
            replies.append(msg)
            if msg.type == "ERROR":
                raise RuntimeError(f"server error {msg.payload.get('code')}: {msg.payload.get('detail')}")
        return replies


def background_windows(
    corpus: Corpus, window_ms: int, hop_ms: int, per_device: int = 10, head: float = 0.15
) -> dict[str, list[WindowVector]]:
    """Owner-held windows from the start of every device, keyed by device.

    The service uses other devices' windows as impostor examples at enrollment.
    """
    out = {}
    for d in corpus.devices:
        windows, owner = device_windows(d, corpus.scripts[d.device_id], corpus.catalog, window_ms, hop_ms)
        cut = max(1, int(len(windows) * head))
        pool = [w for w, o in zip(windows[:cut], owner[:cut]) if o]
        step = max(1, len(pool) // per_device)
        out[d.device_id] = pool[::step][:per_device]
    return out


def run_session(
    corpus: Corpus,
    device_id: str,
    config: ServiceConfig | None = None,
    policy: FeedbackPolicy | None = None,
    seed: int = 0,
    batch_s: int = 60,
    service: Service | None = None,
    stop: int | None = None,
    prompt=None,
    observer=None,
) -> SessionLog:
    """Replay one device's stream through the service, answering prompts per script.

    ``prompt`` may replace the scripted people: it is called as
    ``prompt(kind, holder, message)`` with kind ``"password"`` or ``"pin"``
    and returns ``(ok, consent)``; raising EOFError ends the session cleanly
    with ``stopped="eof"``. ``observer`` sees every reply from the service.
    """
    config = config or ServiceConfig()
    policy = policy or corpus.scripts[device_id].policy
    script = corpus.scripts[device_id]
    device = corpus.device(device_id)
    cfg = config.engine
    if service is None:
        bg = background_windows(corpus, cfg.window_ms, cfg.hop_ms)
        service = Service(corpus.catalog, config, RecordStore(None), background=bg)
    log = SessionLog(device_id)
    client = _Client(service, device_id, log)
    rng = np.random.default_rng([seed, 3])
    locked = {"state": False, "at": None}
    pending_pin: list[str] = []

    def answer(kind: str, holder: str, msg) -> tuple[bool, bool]:
        if prompt is not None:
            return prompt(kind, holder, msg)
        is_owner = holder == script.owner
        if kind == "password":
            p = policy.p_owner if is_owner else policy.p_intruder
            return bool(rng.random() < p), True
        consent = bool(rng.random() < policy.p_consent)
        return is_owner, consent

    def absorb(replies: list[WireMessage]) -> None:
        for r in replies:
            if observer is not None:
                observer(r)
            if r.type == "AUTH_RESULT":
                log.decisions.extend(r.payload["decisions"])
                locked["state"] = r.payload["state"] == "locked_awaiting_password"
            elif r.type == "LOCKED":
                locked["state"] = True
                locked["at"] = r.payload["timestamp"]
                if r.payload.get("window_id") is not None:
                    log.locks.append(r.payload["timestamp"])
            elif r.type == "PIN_CHALLENGE":
                pending_pin.append(r.payload["token"])
            elif r.type == "FEATURE_SET_UPDATE":
                log.feature_updates.append(dict(r.payload))

    def respond(holder: str, ts: int, attempts: int) -> None:
        for _ in range(attempts):
            if not locked["state"]:
                return
            ok, _ = answer("password", holder, locked["at"])
            log.events.append({"timestamp": ts, "kind": "password_correct" if ok else "password_incorrect", "holder": holder})
            absorb(client.send("PASSWORD_EVENT", correct=ok, timestamp=ts))
            while pending_pin:
                token = pending_pin.pop()
                log.challenges.append(ts)
                pin_ok, consent = answer("pin", holder, token)
                log.events.append({"timestamp": ts, "kind": "pin_correct" if pin_ok else "pin_incorrect", "holder": holder})
                absorb(client.send("PIN_RESPONSE", token=token, pin_ok=pin_ok, consent=consent, timestamp=ts))

    try:
        replies = client.send("HELLO")
        if replies and replies[0].type == "RANK_REQUEST":
            absorb(client.send("RANK_RESPONSE", ranks=dict(script.ranking)))
        n = len(device.timestamps) if stop is None else min(stop, len(device.timestamps))
        holders = script.holder_at(device.timestamps[:n])
        per_batch = max(1, int(batch_s * corpus.params.rate_hz))
        i = 0
        while i < n:
            j = min(n, i + per_batch)
            # never let a batch straddle a change of holder
            change = np.flatnonzero(holders[i:j] != holders[i])
            if change.size:
                j = i + int(change[0])
            holder = str(holders[i])
            ts = int(device.timestamps[i])
            if locked["state"] and holder == script.owner:
                respond(holder, ts, policy.max_owner_attempts)
            samples = [s.to_record() for s in iter_samples(device, corpus.catalog, start=i, stop=j)]
            was_locked = locked["state"]
            absorb(client.send("SAMPLE_BATCH", samples=samples))
            if locked["state"] and not was_locked:
                attempts = policy.max_owner_attempts if holder == script.owner else policy.intruder_attempts
                respond(holder, int(device.timestamps[j - 1]), attempts)
            i = j
    except EOFError:
        log.stopped = "eof"
    except Exception as exc:  # recorded, never swallowed silently
        log.aborted = f"{type(exc).__name__}: {exc}"
    return log
