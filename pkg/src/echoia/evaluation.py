"""Timeline accuracy for the adaptive scheme and the fixed all-features baseline."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .classifier import ILLEGITIMATE, LEGITIMATE, WindowVector
from .control import SCHEMES, DeviceEngine, EngineConfig, FeedbackPolicy, replay
from .features import FeatureCatalog
from .simulation import Corpus, device_windows


class EmptyCounts(ValueError):
    """Accuracy of an empty confusion matrix is undefined."""


@dataclass
class ConfusionCounts:
    ta: int = 0  # owner accepted
    tr: int = 0  # intruder rejected
    fa: int = 0  # intruder accepted
    fr: int = 0  # owner rejected

    def add(self, is_owner: bool, label: str) -> None:
        accepted = label == LEGITIMATE
        if is_owner:
            if accepted:
                self.ta += 1
            else:
                self.fr += 1
        elif accepted:
            self.fa += 1
        else:
            self.tr += 1

    @property
    def total(self) -> int:
        return self.ta + self.tr + self.fa + self.fr

    def acc(self) -> float:
        if self.total == 0:
            raise EmptyCounts("no windows counted")
        return (self.ta + self.tr) / self.total

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.ta + other.ta, self.tr + other.tr, self.fa + other.fa, self.fr + other.fr)


def accumulate(pairs) -> ConfusionCounts:
    counts = ConfusionCounts()
    for is_owner, label in pairs:
        counts.add(is_owner, label)
    return counts


def split_bounds(n: int, train_pct: int = 15, parts: int = 10) -> tuple[int, list[int]]:
    """Training prefix length and the window indices closing each evaluation point.

    Evaluation starts after the first ``train_pct`` percent; accuracy is
    reported cumulatively at the end of parts 2 through ``parts``.
    """
    train_end = int(Fraction(n * train_pct, 100))
    return train_end, [i * n // parts for i in range(2, parts + 1)]


@dataclass
class TimelineReport:
    device_id: str
    scheme: str
    points: list[float]
    counts: ConfusionCounts
    initial_features: tuple[str, ...] = ()
    final_features: tuple[str, ...] = ()
    refreshes: int = 0
    locks: int = 0
    c: float = 0.0
    delta: float = 0.0
    stale: bool = False

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["counts"] = asdict(self.counts)
        doc["acc"] = self.counts.acc()
        return doc


def timeline_eval(
    device_id: str,
    windows: Sequence[WindowVector],
    owner: Sequence[bool],
    ranking,
    catalog: FeatureCatalog,
    scheme: str = "echoia",
    config: EngineConfig | None = None,
    policy: FeedbackPolicy | None = None,
    seed: int = 0,
) -> TimelineReport:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    config = config or EngineConfig()
    policy = policy or FeedbackPolicy()
    owner = np.asarray(owner, dtype=bool)
    train_end, bounds = split_bounds(len(windows))
    engine = DeviceEngine(device_id, catalog, config, adaptive=scheme == "echoia")
    engine.rank(ranking)
    initial = engine.features.top
    train = [
        WindowVector(w.values, w.layout, w.window_id, LEGITIMATE if o else ILLEGITIMATE, w.version, w.timestamp)
        for w, o in zip(windows[:train_end], owner[:train_end])
    ]
    engine.fit(train)
    rng = np.random.default_rng([seed, 4])
    records = replay(engine, windows[train_end:], owner[train_end:], policy, rng)
    points, counts = [], ConfusionCounts()
    cursor = train_end
    for b in bounds:
        for is_owner, label, _ in records[cursor - train_end : b - train_end]:
            counts.add(is_owner, label)
        cursor = max(cursor, b)
        points.append(counts.acc() if counts.total else float("nan"))
    locks = sum(1 for _, _, d in records if d is not None and d.acted)
    return TimelineReport(
        device_id,
        scheme,
        points,
        counts,
        initial,
        engine.features.top,
        engine.refreshes,
        locks,
        engine.c,
        engine.delta_threshold,
        engine.stale,
    )


@dataclass
class CorpusReport:
    scheme: str
    users: list[TimelineReport] = field(default_factory=list)

    @property
    def mean_points(self) -> list[float]:
        return np.nanmean(np.array([u.points for u in self.users]), axis=0).tolist()

    @property
    def mean_acc(self) -> float:
        return float(np.mean([u.counts.acc() for u in self.users]))


def per_user_report(
    corpus: Corpus,
    scheme: str = "echoia",
    config: EngineConfig | None = None,
    policy: FeedbackPolicy | None = None,
    seed: int = 0,
    cache: dict | None = None,
) -> CorpusReport:
    """Run :func:`timeline_eval` for every device; ``cache`` reuses windowing across schemes."""
    config = config or EngineConfig()
    report = CorpusReport(scheme)
    for d in corpus.devices:
        key = (d.device_id, config.window_ms, config.hop_ms)
        if cache is not None and key in cache:
            windows, owner = cache[key]
        else:
            windows, owner = device_windows(d, corpus.scripts[d.device_id], corpus.catalog, config.window_ms, config.hop_ms)
            if cache is not None:
                cache[key] = (windows, owner)
        report.users.append(
            timeline_eval(
                d.device_id,
                windows,
                owner,
                corpus.scripts[d.device_id].ranking,
                corpus.catalog,
                scheme,
                config,
                policy,
                seed,
            )
        )
    return report


def write_csv(report: CorpusReport, path: str | os.PathLike) -> None:
    """One row per (device, evaluation point), then the cross-user mean per point."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["scheme", "device_id", "part", "acc"])
        for u in report.users:
            for i, p in enumerate(u.points):
                out.writerow([report.scheme, u.device_id, i + 2, f"{p:.6f}"])
        for i, p in enumerate(report.mean_points):
            out.writerow([report.scheme, "mean", i + 2, f"{p:.6f}"])


def user_table(report: CorpusReport) -> list[list]:
    """Per-user final ACC rows with the arithmetic mean as the last row."""
    rows = [
        [u.device_id, u.counts.acc(), u.counts.ta, u.counts.tr, u.counts.fa, u.counts.fr, u.refreshes, u.locks]
        for u in report.users
    ]
    rows.append(["mean", report.mean_acc, "", "", "", "", "", ""])
    return rows


def write_table(report: CorpusReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["device_id", "acc", "ta", "tr", "fa", "fr", "refreshes", "locks"])
        for row in user_table(report):
            out.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def write_json(reports: Sequence[CorpusReport], path: str | os.PathLike) -> None:
    doc = {
        r.scheme: {
            "mean_acc": r.mean_acc,
            "mean_points": r.mean_points,
            "users": [u.to_document() for u in r.users],
        }
        for r in reports
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path: str | os.PathLike) -> dict[str, CorpusReport]:
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for scheme, body in doc.items():
        users = []
        for u in body["users"]:
            u = dict(u)
            u.pop("acc", None)
            u["counts"] = ConfusionCounts(**u["counts"])
            u["initial_features"] = tuple(u["initial_features"])
            u["final_features"] = tuple(u["final_features"])
            users.append(TimelineReport(**u))
        out[scheme] = CorpusReport(scheme, users)
    return out
