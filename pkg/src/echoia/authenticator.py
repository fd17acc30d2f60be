"""Authentication Unit: windowing, smoothed lock decisions and retraining."""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adaptation import EventKind, FeedbackEvent
from .classifier import (
    ILLEGITIMATE,
    LEGITIMATE,
    InsufficientData,
    SingleClassTraining,
    SvmModel,
    WindowVector,
    predict,
    to_sign,
    train_matrix,
)
from .features import SENSITIVE_FEATURES, FeatureCatalog, PersonalFeatureSet

AGGREGATES = ("mean", "std")


class EmptyWindow(ValueError):
    pass


class NotLocked(RuntimeError):
    pass


class SessionError(RuntimeError):
    pass


@dataclass(frozen=True)
class BehaviorSample:
    device_id: str
    timestamp: int
    readings: Mapping[str, tuple[float, ...]]
    hashed: frozenset[str] = frozenset()
    digests: Mapping[str, str] = field(default_factory=dict)

    def validate(self, catalog: FeatureCatalog) -> None:
        for f, vec in self.readings.items():
            if f not in catalog.dims:
                raise ValueError(f"unknown feature {f!r}")
            if len(vec) != catalog.dims[f]:
                raise ValueError(f"{f} reading has {len(vec)} values, expected {catalog.dims[f]}")

    def unhashed_sensitive(self) -> list[str]:
        return sorted(f for f in self.readings if f in SENSITIVE_FEATURES and f not in self.hashed)

    def to_record(self) -> dict:
        rec = {
            "timestamp": self.timestamp,
            "readings": {f: list(v) for f, v in self.readings.items()},
        }
        if self.hashed:
            rec["hashed"] = sorted(self.hashed)
        if self.digests:
            rec["digests"] = dict(self.digests)
        return rec

    @classmethod
    def from_record(cls, device_id: str, rec: Mapping) -> "BehaviorSample":
        return cls(
            device_id=device_id,
            timestamp=int(rec["timestamp"]),
            readings={f: tuple(float(x) for x in v) for f, v in rec["readings"].items()},
            hashed=frozenset(rec.get("hashed", ())),
            digests=dict(rec.get("digests", {})),
        )


# -- layouts ------------------------------------------------------------------


@lru_cache(maxsize=None)
def _layout(features: tuple[str, ...], dims: tuple[int, ...]) -> tuple[tuple[str, str], ...]:
    out = []
    for f, d in zip(features, dims):
        for agg in AGGREGATES:
            out.extend((f, f"{agg}{i}") for i in range(d))
        out.append((f, "missing"))
    return tuple(out)


def layout_for(features: Iterable[str], catalog: FeatureCatalog) -> tuple[tuple[str, str], ...]:
    """Canonical vector layout: per feature in catalog order, means, stds, missing flag."""
    ordered = catalog.ordered(features)
    return _layout(ordered, tuple(catalog.dims[f] for f in ordered))


def full_layout(catalog: FeatureCatalog) -> tuple[tuple[str, str], ...]:
    return layout_for(catalog.features, catalog)


@lru_cache(maxsize=256)
def _projection(source: tuple, target: tuple) -> np.ndarray:
    pos = {key: i for i, key in enumerate(source)}
    return np.array([pos[key] for key in target], dtype=np.intp)


def projection_index(source_layout, target_layout) -> np.ndarray:
    return _projection(tuple(source_layout), tuple(target_layout))


def project(window: WindowVector, pfs: PersonalFeatureSet, catalog: FeatureCatalog) -> WindowVector:
    """Restrict a window built on a wider layout to ``pfs``'s layout."""
    target = layout_for(pfs.features, catalog)
    idx = projection_index(window.layout, target)
    return WindowVector(window.values[idx], target, window.window_id, window.label, pfs.version, window.timestamp)


def build_window(
    samples: Sequence[BehaviorSample],
    pfs: PersonalFeatureSet,
    catalog: FeatureCatalog,
    window_id: int = 0,
) -> WindowVector:
    if not samples:
        raise EmptyWindow("no samples in window")
    device = samples[0].device_id
    if any(s.device_id != device for s in samples):
        raise ValueError("window mixes devices")
    features = catalog.ordered(pfs.features)
    values: list[float] = []
    for f in features:
        d = catalog.dims[f]
        rows = [s.readings[f] for s in samples if f in s.readings]
        if rows:
            arr = np.asarray(rows, dtype=float)
            # shifting by the first row keeps constant windows at exactly zero spread
            shifted = arr - arr[0]
            values.extend(arr.mean(axis=0))
            values.extend(np.sqrt(np.mean(shifted**2, axis=0) - np.mean(shifted, axis=0) ** 2).clip(0))
            values.append(0.0)
        else:
            values.extend([0.0] * (2 * d))
            values.append(1.0)
    return WindowVector(
        np.array(values),
        layout_for(features, catalog),
        window_id=window_id,
        version=pfs.version,
        timestamp=max(s.timestamp for s in samples),
    )


def window_bounds(first_ts: int, last_ts: int, window_ms: int, hop_ms: int, origin: int | None = None):
    """Start times of every window that a stream ending at ``last_ts`` has closed.

    A window ``[start, start + window_ms)`` is closed once a sample at or
    after its end has been seen.
    """
    origin = first_ts if origin is None else origin
    if last_ts < origin + window_ms:
        return np.zeros(0, dtype=np.int64)
    count = (last_ts - origin - window_ms) // hop_ms + 1
    return origin + hop_ms * np.arange(count, dtype=np.int64)


def window_matrix(
    timestamps: np.ndarray,
    values: Mapping[str, np.ndarray],
    catalog: FeatureCatalog,
    window_ms: int,
    hop_ms: int,
    origin: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised full-catalog windowing of one device stream.

    ``values[f]`` is a ``(len(timestamps), dims[f])`` array with NaN rows where
    the feature was not sampled. Returns ``(matrix, starts, last)`` where
    ``last`` is the timestamp of each window's final sample, or -1 for an
    empty window; rows of ``matrix`` follow :func:`full_layout`.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    starts = window_bounds(int(ts[0]), int(ts[-1]), window_ms, hop_ms, origin)
    lo = np.searchsorted(ts, starts, side="left")
    hi = np.searchsorted(ts, starts + window_ms, side="left")
    last = np.where(hi > lo, ts[np.maximum(hi - 1, 0)], -1)
    blocks = []
    for f in catalog.features:
        arr = np.asarray(values[f], dtype=float).reshape(len(ts), catalog.dims[f])
        present = ~np.isnan(arr[:, 0])
        ref = np.nanmean(arr, axis=0) if present.any() else np.zeros(arr.shape[1])
        centred = np.where(present[:, None], arr - ref, 0.0)
        cnt = np.concatenate([[0], np.cumsum(present)])
        s1 = np.vstack([np.zeros(arr.shape[1]), np.cumsum(centred, axis=0)])
        s2 = np.vstack([np.zeros(arr.shape[1]), np.cumsum(centred**2, axis=0)])
        n = (cnt[hi] - cnt[lo]).astype(float)
        safe = np.where(n > 0, n, 1.0)[:, None]
        m1 = (s1[hi] - s1[lo]) / safe
        m2 = (s2[hi] - s2[lo]) / safe
        std = np.sqrt(np.clip(m2 - m1**2, 0.0, None))
        has = (n > 0)[:, None]
        blocks.append(np.where(has, m1 + ref, 0.0))
        blocks.append(np.where(has, std, 0.0))
        blocks.append((~has).astype(float))
    matrix = np.hstack(blocks) if blocks else np.zeros((len(starts), 0))
    return matrix, starts, last


class StreamWindower:
    """Incremental windowing for one device: feed samples, collect closed windows."""

    def __init__(self, window_ms: int, hop_ms: int):
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.start: int | None = None
        self.next_id = 0
        self._buf: deque[BehaviorSample] = deque()

    def push(self, sample: BehaviorSample) -> list[tuple[int, int, list[BehaviorSample]]]:
        """Add a sample; return ``(window_id, start, samples)`` for windows it closes."""
        if self.start is None:
            self.start = sample.timestamp
        closed = []
        while sample.timestamp >= self.start + self.window_ms:
            end = self.start + self.window_ms
            members = [s for s in self._buf if self.start <= s.timestamp < end]
            if members:
                closed.append((self.next_id, self.start, members))
            self.next_id += 1
            self.start += self.hop_ms
            while self._buf and self._buf[0].timestamp < self.start:
                self._buf.popleft()
        self._buf.append(sample)
        return closed


# -- session state machine ----------------------------------------------------


class LockState(str, enum.Enum):
    UNLOCKED = "unlocked"
    LOCKED = "locked_awaiting_password"
    PIN_PENDING = "pin_challenge_pending"


@dataclass(frozen=True)
class SessionState:
    state: LockState = LockState.UNLOCKED
    since: int = 0
    consecutive_illegit: int = 0
    recent: tuple[bool, ...] = ()  # newest last; True marks an illegitimate window label
    locked_at: int | None = None


@dataclass(frozen=True)
class Smoothing:
    m: int = 3
    n: int = 5

    def __post_init__(self):
        if not 1 <= self.m <= self.n:
            raise ValueError("smoothing needs 1 <= m <= n")


@dataclass(frozen=True)
class AuthDecision:
    window_id: int
    score: float
    label: str
    smoothed_label: str
    acted: bool
    timestamp: int = 0

    def to_record(self, device_id: str, transition: str | None) -> dict:
        return {
            "timestamp": self.timestamp,
            "device_id": device_id,
            "window_id": self.window_id,
            "score": self.score,
            "label": self.label,
            "smoothed_label": self.smoothed_label,
            "transition": transition,
        }


def step(
    session: SessionState, window_id: int, score: float, label: str, timestamp: int, smoothing: Smoothing
) -> tuple[AuthDecision, SessionState]:
    """Apply one window label to an unlocked session."""
    if session.state != LockState.UNLOCKED:
        raise SessionError(f"cannot score windows while {session.state.value}")
    bad = label == ILLEGITIMATE
    recent = (session.recent + (bad,))[-smoothing.n:]
    smoothed_bad = sum(recent) >= smoothing.m
    smoothed = ILLEGITIMATE if smoothed_bad else LEGITIMATE
    consecutive = session.consecutive_illegit + 1 if bad else 0
    if smoothed_bad:
        new = SessionState(LockState.LOCKED, timestamp, consecutive, (), timestamp)
    else:
        new = replace(session, consecutive_illegit=consecutive, recent=recent)
    return AuthDecision(window_id, score, label, smoothed, smoothed_bad, timestamp), new


def decide(
    model: SvmModel,
    window: WindowVector,
    session: SessionState,
    smoothing: Smoothing,
) -> tuple[AuthDecision, SessionState]:
    score, label = predict(model, window)
    return step(session, window.window_id, score, label, window.timestamp, smoothing)


def handle_password(
    session: SessionState, correct: bool, device_id: str, timestamp: int | None = None
) -> tuple[SessionState, FeedbackEvent]:
    if session.state != LockState.LOCKED:
        raise NotLocked(f"session is {session.state.value}")
    # the event is stamped with the lock that prompted it
    when = session.locked_at if session.locked_at is not None else session.since
    if correct:
        new = SessionState(LockState.UNLOCKED, timestamp if timestamp is not None else when, 0, (), None)
        return new, FeedbackEvent(EventKind.PASSWORD_CORRECT, when, device_id)
    return session, FeedbackEvent(EventKind.PASSWORD_INCORRECT, when, device_id)


def enter_pin_challenge(session: SessionState, timestamp: int) -> SessionState:
    if session.state == LockState.PIN_PENDING:
        raise SessionError("challenge already pending")
    return SessionState(LockState.PIN_PENDING, timestamp, session.consecutive_illegit, (), session.locked_at)


def leave_pin_challenge(session: SessionState, timestamp: int) -> SessionState:
    if session.state != LockState.PIN_PENDING:
        raise SessionError("no challenge pending")
    # the challenge is only issued after a correct password, so the device returns to unlocked
    return SessionState(LockState.UNLOCKED, timestamp, 0, (), None)


# -- retraining ---------------------------------------------------------------


@dataclass(frozen=True)
class RetrainConfig:
    every: int = 500
    min_per_class: int = 5
    pseudo_cap: int = 300


class TrainingBuffer:
    """Labeled windows on the full catalog layout.

    ``anchor`` holds the original labeled training windows and is never
    evicted; ``pseudo`` is a bounded, trailing queue of windows the stream
    accepted as legitimate and that were not followed by a lock.
    """

    def __init__(self, anchor: Sequence[WindowVector], cap: int = 300):
        self.anchor = list(anchor)
        self.pseudo: deque[WindowVector] = deque(maxlen=cap)

    def __len__(self) -> int:
        return len(self.anchor) + len(self.pseudo)

    def windows(self) -> list[WindowVector]:
        return self.anchor + list(self.pseudo)

    def class_counts(self) -> tuple[int, int]:
        legit = sum(1 for w in self.windows() if w.label == LEGITIMATE)
        return legit, len(self) - legit


def retrain(
    buffer: TrainingBuffer,
    pfs: PersonalFeatureSet,
    catalog: FeatureCatalog,
    c: float,
    min_per_class: int,
) -> SvmModel:
    """Fit a model for ``pfs`` from the buffer; InsufficientData keeps the caller's old model."""
    windows = buffer.windows()
    legit, illegit = buffer.class_counts()
    if legit < min_per_class or illegit < min_per_class:
        raise InsufficientData(f"need {min_per_class} windows per class, have {legit}/{illegit}")
    target = layout_for(pfs.features, catalog)
    idx = projection_index(windows[0].layout, target)
    x = np.vstack([w.values for w in windows])[:, idx]
    y = np.array([to_sign(w.label) for w in windows])
    try:
        return train_matrix(x, y, c, version=pfs.version, layout=target)
    except SingleClassTraining as exc:
        raise InsufficientData(str(exc)) from None


class DecisionLog:
    """Append-only decision records, optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def flush(self) -> None:
        if self._fh:
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None
