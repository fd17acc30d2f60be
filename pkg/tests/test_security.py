import copy

import numpy as np

from echoia.adaptation import ChallengeBook, EventKind
from echoia.authenticator import LockState, NotLocked, SessionError, SessionState, Smoothing, full_layout
from echoia.classifier import ILLEGITIMATE, LEGITIMATE, WindowVector
from echoia.control import DeviceEngine, EngineConfig
from echoia.features import FeatureCatalog

CAT = FeatureCatalog.default()
LAYOUT = full_layout(CAT)


def pool(rng, n, centre, label):
    return [WindowVector(rng.normal(centre, 1.0, len(LAYOUT)), LAYOUT, i, label, 0, 0) for i in range(n)]


def make_engines(seed):
    rng = np.random.default_rng(seed)
    owner, other = pool(rng, 40, 0.0, LEGITIMATE), pool(rng, 40, 1.0, ILLEGITIMATE)
    train = [w for pair in zip(owner, other) for w in pair]
    book = ChallengeBook(timeout_ms=5_000)  # shared on purpose: the stricter setting
    engines = []
    for i, dev in enumerate(("dev-a", "dev-b")):
        cfg = EngineConfig(smoothing=Smoothing(1 + i, 2 + i), grid_c=(1.0,), grid_delta=(1.0,), folds=2)
        eng = DeviceEngine(dev, CAT, cfg, challenges=book)
        eng.rank({f: r for r, f in enumerate(rng.permutation(CAT.candidates), 1)})
        eng.fit(train, select=False)
        eng.delta_threshold = 1.0
        engines.append(eng)
    stream = pool(rng, 400, 0.0, LEGITIMATE) + pool(rng, 400, 1.0, ILLEGITIMATE)
    return engines, stream


def snapshot(eng):
    return (
        eng.session,
        eng.features,
        copy.deepcopy(eng.weights.as_dict()),
        eng.acc.deltas(),
        id(eng.model),
        len(eng.events),
        eng.refreshes,
    )


def fuzz_engines(iterations, seed=0):
    """Random operations against two devices; returns the list of gate violations."""
    rng = np.random.default_rng(seed)
    engines, stream = make_engines(seed)
    tokens = {e.device_id: None for e in engines}
    violations = []
    now = 0
    for it in range(iterations):
        now += int(rng.integers(0, 3_000))
        target = int(rng.integers(2))
        eng, other = engines[target], engines[1 - target]
        before, other_before = snapshot(eng), snapshot(other)
        state0, version0, n_events = eng.session.state, eng.features.version, len(eng.events)
        op = rng.integers(4)
        try:
            if op == 0:
                w = stream[int(rng.integers(len(stream)))]
                eng.observe(WindowVector(w.values, w.layout, it, w.label, 0, now))
            elif op == 1:
                _, tok = eng.password(bool(rng.random() < 0.5), now)
                if tok is not None:
                    tokens[eng.device_id] = tok.token
            else:
                choice = rng.integers(4)
                token = {
                    0: tokens[eng.device_id],
                    1: tokens[other.device_id],
                    2: "f" * 32,
                    3: tokens[eng.device_id],
                }[int(choice)] or "none"
                at = now + (10_000 if choice == 3 else 0)
                eng.pin(token, bool(rng.random() < 0.7), bool(rng.random() < 0.7), at)
        except (NotLocked, SessionError):
            if snapshot(eng) != before:
                violations.append((it, "rejected operation mutated state"))
        new_events = [e.kind for e in eng.events[n_events:]]
        if state0 == LockState.LOCKED and eng.session.state != LockState.LOCKED:
            if EventKind.PASSWORD_CORRECT not in new_events:
                violations.append((it, "unlock without password_correct"))
        if eng.features.version != version0 and EventKind.PIN_CORRECT not in new_events:
            violations.append((it, "feature set changed without pin_correct"))
        if snapshot(other) != other_before:
            violations.append((it, "cross-device mutation"))
    return violations, engines


def test_short_fuzz_run_has_no_violations():
    violations, engines = fuzz_engines(5_000, seed=1)
    assert violations == []
    # the fuzz must actually exercise the gates
    kinds = {e.kind for eng in engines for e in eng.events}
    assert {EventKind.PASSWORD_CORRECT, EventKind.PASSWORD_INCORRECT, EventKind.PIN_CORRECT, EventKind.PIN_INCORRECT} <= kinds
    assert sum(eng.refreshes for eng in engines) > 0


def test_foreign_token_is_refused():
    (a, b), _ = make_engines(3)
    for eng, ts in ((a, 0), (b, 1)):
        for t in (ts, ts + 1):
            eng.session = SessionState(LockState.LOCKED, t, 0, (), t)
            eng.password(True, t)
    ta, tb = a.challenge, b.challenge
    assert ta is not None and tb is not None
    assert a.pin(tb.token, True, True, 2) is None
    assert a.features.version == 1
    assert b.pin(tb.token, True, True, 3) is not None
