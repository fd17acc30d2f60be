"""Password/PIN feedback engine.

Correct passwords lower the system's confidence in the current top features,
incorrect passwords raise it. Once the accumulated confidence loss of any top
feature exceeds the threshold, the user is challenged for a PIN; only a
correct PIN plus consent lets the new weights take effect.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

from .features import FeatureCatalog, PersonalFeatureSet, WeightVector, select_top_k


class WrongEventKind(ValueError):
    pass


class ChallengeAlreadyPending(RuntimeError):
    pass


class EventKind(str, enum.Enum):
    PASSWORD_CORRECT = "password_correct"
    PASSWORD_INCORRECT = "password_incorrect"
    PIN_CORRECT = "pin_correct"
    PIN_INCORRECT = "pin_incorrect"


PASSWORD_KINDS = (EventKind.PASSWORD_CORRECT, EventKind.PASSWORD_INCORRECT)


@dataclass(frozen=True)
class FeedbackEvent:
    kind: EventKind
    timestamp: int
    device_id: str

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "timestamp": self.timestamp, "device_id": self.device_id}


@dataclass(frozen=True)
class AdaptationConfig:
    delta_threshold: float = 3.0
    eta_incorrect: float = 0.25
    eta_correct: float = 1.0
    weight_floor: float = 1e-6
    k: int = 5
    pin_timeout_ms: int = 120_000

    def __post_init__(self):
        for name in ("delta_threshold", "eta_incorrect", "eta_correct", "weight_floor", "k", "pin_timeout_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class DeltaAccumulator:
    """Per-feature feedback totals over the current top set.

    ``increased`` holds the incorrect-password evidence and ``decreased``
    the correct-password evidence; the signed change is their difference.
    """

    increased: Mapping[str, float]
    decreased: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "increased", MappingProxyType(dict(self.increased)))
        object.__setattr__(self, "decreased", MappingProxyType(dict(self.decreased)))
        if set(self.increased) != set(self.decreased):
            raise ValueError("accumulator halves must cover the same features")

    @classmethod
    def fresh(cls, features: Iterable[str]) -> "DeltaAccumulator":
        features = tuple(features)
        return cls({f: 0.0 for f in features}, {f: 0.0 for f in features})

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(self.increased)

    def delta(self, feature: str) -> float:
        return self.increased[feature] - self.decreased[feature]

    def deltas(self) -> dict[str, float]:
        return {f: self.delta(f) for f in self.increased}

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.increased.values()) and all(
            v == 0.0 for v in self.decreased.values()
        )


def record_password_event(
    acc: DeltaAccumulator, event: FeedbackEvent, cfg: AdaptationConfig
) -> DeltaAccumulator:
    if event.kind == EventKind.PASSWORD_CORRECT:
        return DeltaAccumulator(
            acc.increased, {f: v + cfg.eta_correct for f, v in acc.decreased.items()}
        )
    if event.kind == EventKind.PASSWORD_INCORRECT:
        return DeltaAccumulator(
            {f: v + cfg.eta_incorrect for f, v in acc.increased.items()}, acc.decreased
        )
    raise WrongEventKind(f"not a password event: {event.kind}")


def significant_change(acc: DeltaAccumulator, cfg: AdaptationConfig) -> bool:
    """True when some top feature has lost more than the threshold in confidence."""
    return any(-acc.delta(f) > cfg.delta_threshold for f in acc.features)


def apply_refresh(
    weights: WeightVector,
    acc: DeltaAccumulator,
    pin_ok: bool,
    consent: bool,
    cfg: AdaptationConfig,
    catalog: FeatureCatalog,
    current: PersonalFeatureSet,
) -> tuple[WeightVector, PersonalFeatureSet] | None:
    """Fold the accumulated deltas into the weights and reselect the top set.

    Returns ``None`` when the PIN gate stays closed. Callers reset the
    accumulator in either case.
    """
    if not (pin_ok and consent):
        return None
    updated = weights.as_dict()
    for f in acc.features:
        updated[f] = max(updated[f] + acc.delta(f), cfg.weight_floor)
    new_weights = WeightVector(updated)
    new_set = select_top_k(new_weights, cfg.k, catalog, version=current.version + 1)
    return new_weights, new_set


@dataclass(frozen=True)
class ChallengeToken:
    token: str
    device_id: str
    issued_at: int
    expires_at: int


@dataclass
class ChallengeBook:
    """Outstanding PIN challenges, at most one per device.

    Tokens are derived from a server salt and a per-book counter so that a
    replayed message log yields identical tokens.
    """

    timeout_ms: int = 120_000
    salt: str = "echoia"
    _pending: dict[str, ChallengeToken] = field(default_factory=dict)
    _counter: int = 0

    def pending(self, device_id: str) -> ChallengeToken | None:
        return self._pending.get(device_id)

    def issue(self, device_id: str, now: int) -> ChallengeToken:
        if device_id in self._pending:
            raise ChallengeAlreadyPending(device_id)
        self._counter += 1
        digest = hashlib.sha256(f"{self.salt}:{device_id}:{self._counter}:{now}".encode()).hexdigest()
        tok = ChallengeToken(digest[:32], device_id, now, now + self.timeout_ms)
        self._pending[device_id] = tok
        return tok

    def redeem(self, device_id: str, token: str, now: int) -> bool:
        """Consume the pending challenge; False for unknown, wrong or expired tokens."""
        tok = self._pending.pop(device_id, None)
        if tok is None or tok.token != token:
            return False
        return now <= tok.expires_at
