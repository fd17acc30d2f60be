"""Control Unit: one device's feature weights, feedback state, session and model."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adaptation import (
    AdaptationConfig,
    ChallengeBook,
    ChallengeToken,
    DeltaAccumulator,
    EventKind,
    FeedbackEvent,
    apply_refresh,
    record_password_event,
    significant_change,
)
from .authenticator import (
    AuthDecision,
    DecisionLog,
    LockState,
    RetrainConfig,
    SessionError,
    SessionState,
    Smoothing,
    TrainingBuffer,
    decide,
    enter_pin_challenge,
    handle_password,
    leave_pin_challenge,
    project,
    retrain,
)
from .classifier import ILLEGITIMATE, LEGITIMATE, CvReport, InsufficientData, SvmModel, WindowVector, cross_validate
from .features import (
    FeatureCatalog,
    PersonalFeatureSet,
    WeightVector,
    all_features_set,
    init_weights,
    select_top_k,
    uniform_weights,
)

log = logging.getLogger(__name__)

SCHEMES = ("echoia", "fixed_all_features")


@dataclass(frozen=True)
class EngineConfig:
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    smoothing: Smoothing = field(default_factory=Smoothing)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    folds: int = 5
    grid_c: tuple[float, ...] = (0.1, 1.0, 10.0)
    grid_delta: tuple[float, ...] = (1.0, 2.0, 3.0, 5.0)
    window_ms: int = 30_000
    hop_ms: int = 15_000

    @property
    def grid(self) -> list[tuple[float, float]]:
        return [(c, d) for c in self.grid_c for d in self.grid_delta]


@dataclass(frozen=True)
class FeedbackPolicy:
    """How simulated people answer prompts."""

    p_owner: float = 0.98
    p_intruder: float = 0.0
    intruder_attempts: int = 5
    p_consent: float = 1.0
    max_owner_attempts: int = 20


# deterministic policy used inside cross-validation replays
CV_POLICY = FeedbackPolicy(p_owner=1.0, p_intruder=0.0, p_consent=1.0)


class DeviceEngine:
    """Everything the server keeps for one device.

    ``adaptive=False`` gives the fixed all-features baseline: the feature
    set never changes and password events do not feed the adaptation state.
    """

    def __init__(
        self,
        device_id: str,
        catalog: FeatureCatalog,
        config: EngineConfig | None = None,
        adaptive: bool = True,
        challenges: ChallengeBook | None = None,
        log_sink: DecisionLog | None = None,
    ):
        self.device_id = device_id
        self.catalog = catalog
        self.config = config or EngineConfig()
        self.adaptive = adaptive
        self.challenges = challenges or ChallengeBook(timeout_ms=self.config.adaptation.pin_timeout_ms)
        self.log = log_sink or DecisionLog()
        self.weights: WeightVector = uniform_weights(catalog)
        self.features: PersonalFeatureSet | None = None if adaptive else all_features_set(catalog)
        self.acc = DeltaAccumulator.fresh(self.features.top if self.features else ())
        self.session = SessionState()
        self.model: SvmModel | None = None
        self.model_features: PersonalFeatureSet | None = None
        self.c = self.config.grid_c[0]
        self.delta_threshold = self.config.adaptation.delta_threshold
        self.buffer: TrainingBuffer | None = None
        self.events: list[FeedbackEvent] = []
        self.refreshes = 0
        self.stale = False
        self.retrain_count = 0
        self.cv_report: CvReport | None = None
        self._accepted = 0
        self._pending: deque[list] = deque()

    # -- state ------------------------------------------------------------

    @property
    def adaptation_config(self) -> AdaptationConfig:
        return replace(self.config.adaptation, delta_threshold=self.delta_threshold)

    @property
    def initialized(self) -> bool:
        return self.features is not None

    @property
    def locked(self) -> bool:
        return self.session.state == LockState.LOCKED

    @property
    def challenge(self) -> ChallengeToken | None:
        return self.challenges.pending(self.device_id)

    # -- initialization phase -------------------------------------------

    def rank(self, ranks) -> PersonalFeatureSet:
        """Take the user's ranking of the candidates and pick the first top set."""
        if not self.adaptive:
            return self.features
        self.weights = init_weights(ranks, self.catalog)
        version = self.features.version + 1 if self.features else 1
        self.features = select_top_k(self.weights, self.config.adaptation.k, self.catalog, version)
        self.acc = DeltaAccumulator.fresh(self.features.top)
        return self.features

    def fit(self, windows: Sequence[WindowVector], select: bool = True) -> CvReport | None:
        """Train on labeled full-layout windows, choosing (C, delta) by temporal CV."""
        if self.features is None:
            raise SessionError("device has no feature set yet")
        report = None
        if select:
            report = cross_validate(
                [project(w, self.features, self.catalog) for w in windows],
                self.config.folds,
                self.config.grid,
                scorer=self._cv_scorer(windows),
            )
            self.c, self.delta_threshold = report.selected
            self.cv_report = report
        self.buffer = TrainingBuffer(windows, cap=self.config.retrain.pseudo_cap)
        self.model = retrain(self.buffer, self.features, self.catalog, self.c, min_per_class=1)
        self.model.delta_threshold = self.delta_threshold
        self.model_features = self.features
        self.stale = False
        self.retrain_count += 1
        return report

    def _cv_scorer(self, full_windows: Sequence[WindowVector]):
        by_id = {w.window_id: w for w in full_windows}

        def score(train, test, model, c, delta) -> float:
            sim = DeviceEngine(self.device_id, self.catalog, self.config, self.adaptive)
            sim.weights = self.weights
            sim.features = self.features
            sim.acc = DeltaAccumulator.fresh(self.features.top if self.adaptive else ())
            sim.c, sim.delta_threshold = c, delta
            sim.buffer = TrainingBuffer([by_id[w.window_id] for w in train], cap=self.config.retrain.pseudo_cap)
            sim.model, sim.model_features = model, self.features
            test_full = [by_id[w.window_id] for w in test]
            records = replay(sim, test_full, [w.label == LEGITIMATE for w in test_full], CV_POLICY)
            return sum(owner == (lab == LEGITIMATE) for owner, lab, _ in records) / len(records)

        return score

    # -- authentication phase -------------------------------------------

    def observe(self, window: WindowVector) -> AuthDecision | None:
        """Score one full-layout window; None while locked, challenged or untrained."""
        if self.session.state != LockState.UNLOCKED or self.model is None:
            return None
        scored = project(window, self.model_features, self.catalog)
        decision, self.session = decide(self.model, scored, self.session, self.config.smoothing)
        self.log.append(
            decision.to_record(self.device_id, LockState.LOCKED.value if decision.acted else None)
        )
        self._guard(window, decision)
        return decision

    def _guard(self, window: WindowVector, decision: AuthDecision) -> None:
        """Pseudo-label bookkeeping for periodic retraining."""
        if decision.acted:
            self._pending.clear()
            return
        for entry in self._pending:
            entry[1] -= 1
        while self._pending and self._pending[0][1] <= 0:
            w = self._pending.popleft()[0]
            if self.buffer is not None:
                self.buffer.pseudo.append(
                    WindowVector(w.values, w.layout, w.window_id, LEGITIMATE, w.version, w.timestamp)
                )
        if decision.smoothed_label == LEGITIMATE:
            self._pending.append([window, self.config.smoothing.n])
            self._accepted += 1
        if self._accepted >= self.config.retrain.every:
            self._accepted = 0
            self._retrain("periodic")

    def _retrain(self, trigger: str) -> bool:
        if self.buffer is None:
            return False
        try:
            model = retrain(
                self.buffer, self.features, self.catalog, self.c, self.config.retrain.min_per_class
            )
        except InsufficientData as exc:
            log.info("%s: %s retrain skipped: %s", self.device_id, trigger, exc)
            if trigger == "refresh":
                self.stale = True
            return False
        model.delta_threshold = self.delta_threshold
        self.model, self.model_features = model, self.features
        self.stale = False
        self.retrain_count += 1
        return True

    def password(self, correct: bool, timestamp: int) -> tuple[FeedbackEvent, ChallengeToken | None]:
        self.session, event = handle_password(self.session, correct, self.device_id, timestamp)
        self.events.append(event)
        if not self.adaptive:
            return event, None
        cfg = self.adaptation_config
        self.acc = record_password_event(self.acc, event, cfg)
        if correct and significant_change(self.acc, cfg):
            token = self.challenges.issue(self.device_id, timestamp)
            self.session = enter_pin_challenge(self.session, timestamp)
            return event, token
        return event, None

    def pin(self, token: str, pin_ok: bool, consent: bool, timestamp: int) -> PersonalFeatureSet | None:
        """Answer the pending PIN challenge; returns the new feature set on refresh."""
        if self.session.state != LockState.PIN_PENDING:
            raise SessionError("no PIN challenge pending")
        valid = self.challenges.redeem(self.device_id, token, timestamp)
        pin_ok = bool(pin_ok and valid)
        kind = EventKind.PIN_CORRECT if pin_ok else EventKind.PIN_INCORRECT
        self.events.append(FeedbackEvent(kind, timestamp, self.device_id))
        outcome = apply_refresh(
            self.weights, self.acc, pin_ok, consent, self.adaptation_config, self.catalog, self.features
        )
        self.session = leave_pin_challenge(self.session, timestamp)
        if outcome is None:
            self.acc = DeltaAccumulator.fresh(self.features.top)
            return None
        self.weights, self.features = outcome
        self.acc = DeltaAccumulator.fresh(self.features.top)
        self.refreshes += 1
        self._pending.clear()
        self._retrain("refresh")
        return self.features


def replay(
    engine: DeviceEngine,
    windows: Sequence[WindowVector],
    owner: Sequence[bool],
    policy: FeedbackPolicy,
    rng: np.random.Generator | None = None,
) -> list[tuple[bool, str, AuthDecision | None]]:
    """Drive an engine through a labeled window stream with simulated people.

    ``owner[i]`` says whether the device owner holds the device during window
    ``i``. Every window yields ``(owner, effective_label, decision)``: the
    smoothed label when the window was scored, ``illegitimate`` while the
    device stays locked, ``legitimate`` when no model is available.
    """
    rng = rng or np.random.default_rng(0)
    out = []
    for window, is_owner in zip(windows, owner):
        ts = window.timestamp
        if engine.locked:
            if is_owner:
                _owner_unlock(engine, policy, rng, ts)
            else:
                out.append((False, ILLEGITIMATE, None))
                continue
        decision = engine.observe(window)
        if decision is None:
            out.append((is_owner, LEGITIMATE, None))
            continue
        out.append((is_owner, decision.smoothed_label, decision))
        if decision.acted:
            if is_owner:
                _owner_unlock(engine, policy, rng, ts)
            else:
                _intruder_attempts(engine, policy, rng, ts)
    return out


def _owner_unlock(engine: DeviceEngine, policy: FeedbackPolicy, rng, ts: int) -> None:
    for _ in range(policy.max_owner_attempts):
        correct = policy.p_owner >= 1.0 or rng.random() < policy.p_owner
        _, token = engine.password(correct, ts)
        if token is not None:
            consent = policy.p_consent >= 1.0 or rng.random() < policy.p_consent
            engine.pin(token.token, True, consent, ts)
        if correct:
            return
    # a hopeless typist still gets in eventually
    _, token = engine.password(True, ts)
    if token is not None:
        engine.pin(token.token, True, True, ts)


def _intruder_attempts(engine: DeviceEngine, policy: FeedbackPolicy, rng, ts: int) -> None:
    for _ in range(policy.intruder_attempts):
        correct = policy.p_intruder > 0 and rng.random() < policy.p_intruder
        _, token = engine.password(correct, ts)
        if token is not None:
            engine.pin(token.token, False, False, ts)
        if correct:
            return
