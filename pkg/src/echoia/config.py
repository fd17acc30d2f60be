"""Flat ``key = value`` experiment configuration with ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Any

from .adaptation import AdaptationConfig
from .authenticator import RetrainConfig, Smoothing
from .control import SCHEMES, EngineConfig, FeedbackPolicy
from .service import ServiceConfig
from .simulation import DriftSpec, GenParams


class ConfigError(ValueError):
    pass


def _help(text: str, **kw):
    return field(metadata={"help": text}, **kw)


@dataclass
class ExperimentConfig:
    seed: int = _help("corpus and feedback randomness", default=0)
    n_users: int = _help("simulated users, one device each", default=17)
    duration: int = _help("timeline length per device in seconds", default=4 * 3600)
    separation: float = _help("planted-feature distance from the population mean, in std units", default=3.0)
    k: int = _help("size of the personal feature set", default=5)
    rank_noise: float = _help("noise on the simulated users' feature rankings", default=0.35)
    lead_in: int = _help("owner-only seconds before the first intruder episode", default=0)
    drift: str = _help("none | noise | planted", default="none")
    drift_onset: float = _help("drift onset as a fraction of the timeline", default=0.3)
    delta: float = _help("refresh threshold used when cv_select is false", default=3.0)
    eta_i: float = _help("weight gain per incorrect password", default=0.25)
    eta_c: float = _help("weight loss per correct password", default=1.0)
    smoothing_m: int = _help("illegitimate labels needed to lock", default=3)
    smoothing_n: int = _help("window of recent labels considered", default=5)
    window_ms: int = _help("window length", default=30_000)
    hop_ms: int = _help("window hop", default=15_000)
    folds: int = _help("temporal cross-validation folds", default=5)
    grid_c: tuple[float, ...] = _help("SVM C candidates", default=(0.1, 1.0, 10.0))
    grid_delta: tuple[float, ...] = _help("refresh threshold candidates", default=(1.0, 2.0, 3.0, 5.0))
    cv_select: bool = _help("pick C and delta by cross-validation", default=True)
    retrain_every: int = _help("accepted windows between periodic retrains", default=500)
    p_owner: float = _help("owner password success probability", default=0.98)
    p_intruder: float = _help("intruder password success probability", default=0.0)
    intruder_attempts: int = _help("password guesses an intruder makes per lock", default=5)
    enroll_windows: int = _help("owner windows labeled legitimate at enrollment (service path)", default=120)
    scheme: str = _help("echoia | fixed_all_features | both", default="both")
    corpus: str = _help("corpus directory", default="corpus")
    out: str = _help("report directory", default="reports")
    data_dir: str = _help("service store directory", default="data")
    host: str = _help("service listen address", default="127.0.0.1")
    port: int = _help("service listen port", default=7878)
    fsync: bool = _help("fsync every store append", default=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES + ("both",):
            raise ConfigError(f"scheme must be one of {SCHEMES + ('both',)}, got {self.scheme!r}")
        if self.drift not in ("none", "noise", "planted"):
            raise ConfigError(f"drift must be none, noise or planted, got {self.drift!r}")

    @property
    def schemes(self) -> tuple[str, ...]:
        return SCHEMES if self.scheme == "both" else (self.scheme,)

    def gen_params(self) -> GenParams:
        return GenParams(
            seed=self.seed,
            n_users=self.n_users,
            duration_s=self.duration,
            separation=self.separation,
            k=self.k,
            rank_noise=self.rank_noise,
            lead_in_s=self.lead_in,
            drift=DriftSpec(kind=self.drift, onset=self.drift_onset),
        )

    def engine_config(self) -> EngineConfig:
        grid_delta = self.grid_delta if self.cv_select else (self.delta,)
        return EngineConfig(
            adaptation=AdaptationConfig(
                delta_threshold=self.delta, eta_incorrect=self.eta_i, eta_correct=self.eta_c, k=self.k
            ),
            smoothing=Smoothing(self.smoothing_m, self.smoothing_n),
            retrain=RetrainConfig(every=self.retrain_every),
            folds=self.folds,
            grid_c=self.grid_c if self.cv_select else self.grid_c[:1],
            grid_delta=grid_delta,
            window_ms=self.window_ms,
            hop_ms=self.hop_ms,
        )

    def policy(self) -> FeedbackPolicy:
        return FeedbackPolicy(p_owner=self.p_owner, p_intruder=self.p_intruder, intruder_attempts=self.intruder_attempts)

    def service_config(self) -> ServiceConfig:
        return ServiceConfig(engine=self.engine_config(), enroll_windows=self.enroll_windows)


def _field_types() -> dict[str, Any]:
    hints = {"int": int, "float": float, "bool": bool, "str": str, "tuple[float, ...]": tuple}
    return {f.name: hints[f.type] for f in fields(ExperimentConfig)}


def coerce(key: str, text: str) -> Any:
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(x) for x in text.split(",") if x.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return ExperimentConfig(**values)


def load(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), str(path))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return str(value)


def serialize(cfg: ExperimentConfig) -> str:
    """Every key with its current value; the field help becomes a comment."""
    lines = []
    for f in fields(cfg):
        lines.append(f"# {f.metadata['help']}")
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in changes.items() if v is not None})
