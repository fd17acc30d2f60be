import random
from functools import reduce

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoia.adaptation import (
    AdaptationConfig,
    ChallengeAlreadyPending,
    ChallengeBook,
    DeltaAccumulator,
    EventKind,
    FeedbackEvent,
    WrongEventKind,
    apply_refresh,
    record_password_event,
    significant_change,
)
from echoia.features import FeatureCatalog, PersonalFeatureSet, WeightVector

TOP = ("a", "b")
CORRECT = EventKind.PASSWORD_CORRECT
INCORRECT = EventKind.PASSWORD_INCORRECT


def ev(kind, ts=0, device="d"):
    return FeedbackEvent(kind, ts, device)


def fold(kinds, cfg, top=TOP):
    return reduce(lambda acc, k: record_password_event(acc, ev(k), cfg), kinds, DeltaAccumulator.fresh(top))


def test_single_correct_password_lowers_every_top_feature():
    acc = fold([CORRECT], AdaptationConfig(eta_correct=1.0))
    assert acc.deltas() == {"a": -1.0, "b": -1.0}


def test_single_incorrect_password_raises_every_top_feature():
    acc = fold([INCORRECT], AdaptationConfig(eta_incorrect=1.0))
    assert acc.deltas() == {"a": 1.0, "b": 1.0}


def test_three_correct_one_incorrect():
    cfg = AdaptationConfig(eta_incorrect=1.0, eta_correct=1.0)
    acc = fold([CORRECT, INCORRECT, CORRECT, CORRECT], cfg)
    oracle = sum(1.0 if k == INCORRECT else -1.0 for k in [CORRECT, INCORRECT, CORRECT, CORRECT])
    assert acc.delta("a") == oracle == -2.0


def test_pin_events_are_rejected():
    with pytest.raises(WrongEventKind):
        record_password_event(DeltaAccumulator.fresh(TOP), ev(EventKind.PIN_CORRECT), AdaptationConfig())


def test_significant_change_zero_and_threshold():
    cfg = AdaptationConfig(delta_threshold=3.0)
    assert not significant_change(DeltaAccumulator.fresh(TOP), cfg)
    acc = DeltaAccumulator({"a": 0.0, "b": 0.0}, {"a": 3.5, "b": 0.0})
    assert significant_change(acc, cfg)
    at_threshold = DeltaAccumulator({"a": 0.0}, {"a": 3.0})
    assert not significant_change(at_threshold, cfg)


def test_incorrect_passwords_never_trigger():
    cfg = AdaptationConfig(delta_threshold=3.0, eta_incorrect=1.0)
    acc = fold([INCORRECT] * 10, cfg)
    assert acc.delta("a") == 10.0
    assert not significant_change(acc, cfg)


def small_catalog():
    return FeatureCatalog(("f1", "f2", "f3"), {"f1": 1, "f2": 1, "f3": 1}, ())


def test_refresh_replaces_decayed_feature():
    cat = small_catalog()
    w = WeightVector({"f1": 1.0, "f2": 0.8, "f3": 0.6})
    current = PersonalFeatureSet(("f1", "f2"), (), 1)
    acc = DeltaAccumulator({"f1": 0.0, "f2": 0.0}, {"f1": 0.5, "f2": 0.5})
    new_w, new_set = apply_refresh(w, acc, True, True, AdaptationConfig(k=2), cat, current)
    assert new_w.as_dict() == pytest.approx({"f1": 0.5, "f2": 0.3, "f3": 0.6}, abs=1e-15)
    assert new_set.top == ("f1", "f3")
    assert new_set.version == 2


@pytest.mark.parametrize("pin_ok, consent", [(False, True), (True, False), (False, False)])
def test_refresh_gate_closed(pin_ok, consent):
    cat = small_catalog()
    w = WeightVector({"f1": 1.0, "f2": 0.8, "f3": 0.6})
    acc = DeltaAccumulator({"f1": 0.0, "f2": 0.0}, {"f1": 5.0, "f2": 5.0})
    assert apply_refresh(w, acc, pin_ok, consent, AdaptationConfig(k=2), cat, PersonalFeatureSet(("f1", "f2"), ())) is None
    assert w.as_dict() == {"f1": 1.0, "f2": 0.8, "f3": 0.6}


def test_refresh_clamps_to_floor():
    cat = small_catalog()
    w = WeightVector({"f1": 1.0, "f2": 0.8, "f3": 0.6})
    acc = DeltaAccumulator({"f1": 0.0, "f2": 0.0}, {"f1": 9.0, "f2": 0.0})
    cfg = AdaptationConfig(k=2)
    new_w, _ = apply_refresh(w, acc, True, True, cfg, cat, PersonalFeatureSet(("f1", "f2"), ()))
    assert new_w["f1"] == cfg.weight_floor


def test_config_must_be_positive():
    with pytest.raises(ValueError):
        AdaptationConfig(delta_threshold=0.0)
    with pytest.raises(ValueError):
        AdaptationConfig(eta_incorrect=-1.0)


def test_challenge_book_single_pending_and_single_use():
    book = ChallengeBook(timeout_ms=1000)
    tok = book.issue("d", 0)
    assert book.pending("d") == tok
    with pytest.raises(ChallengeAlreadyPending):
        book.issue("d", 1)
    assert book.redeem("d", tok.token, 10)
    assert not book.redeem("d", tok.token, 11)
    assert book.pending("d") is None


def test_challenge_book_expiry_and_wrong_token():
    book = ChallengeBook(timeout_ms=1000)
    tok = book.issue("d", 0)
    assert not book.redeem("d", tok.token, 1001)
    tok = book.issue("d", 2000)
    assert not book.redeem("d", "nope", 2001)
    # a wrong guess burns the challenge
    assert not book.redeem("d", tok.token, 2002)


def test_challenge_tokens_are_reproducible():
    a, b = ChallengeBook(), ChallengeBook()
    assert a.issue("x", 5).token == b.issue("x", 5).token
    assert a.issue("y", 5).token != ChallengeBook().issue("x", 5).token


event_logs = st.lists(st.sampled_from([CORRECT, INCORRECT]), max_size=60)
positive = st.floats(0.01, 5.0)


@settings(max_examples=300, deadline=None)
@given(event_logs, positive, positive)
def test_delta_identity_over_random_logs(kinds, eta_i, eta_c):
    cfg = AdaptationConfig(eta_incorrect=eta_i, eta_correct=eta_c)
    acc = fold(kinds, cfg)
    for f in TOP:
        assert acc.delta(f) == acc.increased[f] - acc.decreased[f]
        assert acc.increased[f] >= 0 and acc.decreased[f] >= 0


@settings(max_examples=200, deadline=None)
@given(event_logs, st.randoms(use_true_random=False))
def test_delta_depends_only_on_event_multiset(kinds, rnd):
    cfg = AdaptationConfig(eta_incorrect=0.25, eta_correct=1.0)
    shuffled = list(kinds)
    rnd.shuffle(shuffled)
    assert fold(kinds, cfg).deltas() == fold(shuffled, cfg).deltas()


@settings(max_examples=200, deadline=None)
@given(event_logs, st.integers(0, 20), st.floats(0.5, 10.0))
def test_more_incorrect_passwords_never_arm_the_trigger(kinds, extra, threshold):
    cfg = AdaptationConfig(delta_threshold=threshold)
    before = significant_change(fold(kinds, cfg), cfg)
    after = significant_change(fold(kinds + [INCORRECT] * extra, cfg), cfg)
    assert not (after and not before)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 3.0), min_size=11, max_size=11), event_logs)
def test_refresh_leaves_positive_weights(values, kinds):
    cat = FeatureCatalog.default()
    cfg = AdaptationConfig()
    w = WeightVector(dict(zip(cat.candidates, values)))
    current = PersonalFeatureSet(cat.candidates[:5], cat.reserved)
    acc = fold(kinds, cfg, current.top)
    new_w, new_set = apply_refresh(w, acc, True, True, cfg, cat, current)
    assert all(v >= cfg.weight_floor for v in new_w.as_dict().values())
    assert new_set.version == current.version + 1
    assert len(new_set.top) == cfg.k


def test_delta_identity_hundred_thousand_logs():
    rng = random.Random(11)
    cfg = AdaptationConfig()
    fresh = DeltaAccumulator.fresh(TOP)
    for _ in range(100_000):
        n_i, n_c = rng.randrange(8), rng.randrange(8)
        acc = fresh
        for k in rng.sample([INCORRECT] * n_i + [CORRECT] * n_c, n_i + n_c):
            acc = record_password_event(acc, ev(k), cfg)
        assert acc.delta("a") == acc.increased["a"] - acc.decreased["a"]
        assert acc.delta("a") == pytest.approx(n_i * cfg.eta_incorrect - n_c * cfg.eta_correct)
