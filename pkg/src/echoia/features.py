"""Feature universe, per-feature weights and personal-feature selection."""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping

DEFAULT_FEATURES = (
    "accelerometer",
    "orientation",
    "magnetometer",
    "gyroscope",
    "touch",
    "light",
    "pressure",
    "temperature",
    "gps",
    "microphone",
    "battery_usage",
    "wifi_status",
)

DEFAULT_DIMS = {
    "accelerometer": 3,
    "orientation": 3,
    "magnetometer": 3,
    "gyroscope": 3,
    "touch": 2,
    "light": 1,
    "pressure": 1,
    "temperature": 1,
    "gps": 3,
    "microphone": 1,
    "battery_usage": 1,
    "wifi_status": 1,
}

DEFAULT_RESERVED = ("touch",)

# Features whose raw payload must be hashed client-side before it is persisted.
SENSITIVE_FEATURES = frozenset({"gps", "wifi_status", "microphone"})


class CatalogError(ValueError):
    pass


class MalformedRanking(ValueError):
    pass


@dataclass(frozen=True)
class FeatureCatalog:
    """Ordered feature universe.

    ``features`` is the canonical order of every known feature; ``reserved``
    features are always used for classification and are never ranked, so the
    candidate set F is ``features`` minus ``reserved``.
    """

    features: tuple[str, ...]
    dims: Mapping[str, int]
    reserved: tuple[str, ...] = ()

    def __post_init__(self):
        features = tuple(self.features)
        reserved = tuple(self.reserved)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "reserved", reserved)
        object.__setattr__(self, "dims", MappingProxyType(dict(self.dims)))
        if len(set(features)) != len(features):
            raise CatalogError("duplicate feature identifiers")
        unknown = [f for f in reserved if f not in features]
        if unknown:
            raise CatalogError(f"reserved features not in catalog: {unknown}")
        if len(set(reserved)) != len(reserved):
            raise CatalogError("duplicate reserved features")
        if not self.candidates:
            raise CatalogError("catalog has no candidate features")
        for f in features:
            d = self.dims.get(f)
            if not isinstance(d, int) or d < 1:
                raise CatalogError(f"feature {f!r} needs a positive integer dimension")

    @classmethod
    def default(cls) -> "FeatureCatalog":
        return cls(DEFAULT_FEATURES, DEFAULT_DIMS, DEFAULT_RESERVED)

    @property
    def candidates(self) -> tuple[str, ...]:
        return tuple(f for f in self.features if f not in self.reserved)

    def index(self, feature: str) -> int:
        return self.features.index(feature)

    def ordered(self, features: Iterable[str]) -> tuple[str, ...]:
        """Return ``features`` in canonical catalog order."""
        wanted = set(features)
        missing = wanted - set(self.features)
        if missing:
            raise CatalogError(f"unknown features: {sorted(missing)}")
        return tuple(f for f in self.features if f in wanted)

    @classmethod
    def from_mapping(cls, entries: Mapping[str, str]) -> "FeatureCatalog":
        """Build a catalog from flat ``key = value`` entries.

        Recognised keys: ``features`` (comma list), ``reserved`` (comma list)
        and ``dims.<feature>`` (integer). Features without an explicit
        dimension fall back to the built-in defaults, then to 1.
        """
        features = _split(entries.get("features", ",".join(DEFAULT_FEATURES)))
        reserved = _split(entries.get("reserved", ",".join(DEFAULT_RESERVED)))
        dims = {f: DEFAULT_DIMS.get(f, 1) for f in features}
        for key, value in entries.items():
            if key.startswith("dims."):
                name = key[len("dims."):]
                if name not in dims:
                    raise CatalogError(f"dimension given for unknown feature {name!r}")
                try:
                    dims[name] = int(value)
                except ValueError:
                    raise CatalogError(f"bad dimension for {name!r}: {value!r}") from None
            elif key not in ("features", "reserved"):
                raise CatalogError(f"unknown catalog key {key!r}")
        return cls(tuple(features), dims, tuple(reserved))

    def to_mapping(self) -> dict[str, str]:
        out = {"features": ",".join(self.features), "reserved": ",".join(self.reserved)}
        for f in self.features:
            out[f"dims.{f}"] = str(self.dims[f])
        return out


def _split(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


@dataclass(frozen=True)
class WeightVector:
    weights: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "weights", MappingProxyType(dict(self.weights)))
        for f, w in self.weights.items():
            if not w > 0:
                raise ValueError(f"weight for {f!r} must be positive, got {w}")

    def __getitem__(self, feature: str) -> float:
        return self.weights[feature]

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)


@dataclass(frozen=True)
class PersonalFeatureSet:
    top: tuple[str, ...]
    reserved: tuple[str, ...]
    version: int = 1

    @property
    def features(self) -> frozenset[str]:
        return frozenset(self.top) | frozenset(self.reserved)

    def ordered(self, catalog: FeatureCatalog) -> tuple[str, ...]:
        return catalog.ordered(self.features)


def uniform_weights(catalog: FeatureCatalog) -> WeightVector:
    """Weights used before any ranking has been received."""
    return WeightVector({f: 1.0 for f in catalog.candidates})


def validate_ranking(ranks: Mapping[str, int], catalog: FeatureCatalog) -> None:
    candidates = catalog.candidates
    unknown = sorted(set(ranks) - set(candidates))
    if unknown:
        raise MalformedRanking(f"ranking names non-candidate features: {unknown}")
    missing = sorted(set(candidates) - set(ranks))
    if missing:
        raise MalformedRanking(f"ranking omits candidates: {missing}")
    values = list(ranks.values())
    if any(isinstance(r, bool) or not isinstance(r, int) for r in values):
        raise MalformedRanking("ranks must be integers")
    if sorted(values) != list(range(1, len(candidates) + 1)):
        raise MalformedRanking(
            f"ranks must be a permutation of 1..{len(candidates)}, got {sorted(values)}"
        )


def init_weights(ranks: Mapping[str, int], catalog: FeatureCatalog) -> WeightVector:
    """Weight every candidate by the reciprocal of its user-assigned rank."""
    validate_ranking(ranks, catalog)
    return WeightVector({f: 1.0 / ranks[f] for f in catalog.candidates})


def select_top_k(
    weights: WeightVector, k: int, catalog: FeatureCatalog, version: int = 1
) -> PersonalFeatureSet:
    """Pick the ``k`` heaviest candidates; equal weights go to the earlier candidate.

    The returned ``top`` tuple is in catalog order.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    candidates = catalog.candidates
    # sorted() is stable, so equal weights keep catalog order
    by_weight = sorted(candidates, key=lambda f: -weights[f])
    chosen = set(by_weight[:k])
    top = tuple(f for f in candidates if f in chosen)
    return PersonalFeatureSet(top=top, reserved=catalog.reserved, version=version)


def all_features_set(catalog: FeatureCatalog, version: int = 1) -> PersonalFeatureSet:
    """The fixed everything-on feature set used by the non-adaptive baseline."""
    return PersonalFeatureSet(top=catalog.candidates, reserved=catalog.reserved, version=version)
