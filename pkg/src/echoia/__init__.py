"""Feedback-driven implicit authentication for mobile devices."""

from .features import FeatureCatalog, PersonalFeatureSet, WeightVector, init_weights, select_top_k

__all__ = ["FeatureCatalog", "PersonalFeatureSet", "WeightVector", "init_weights", "select_top_k"]
__version__ = "0.1.0"
