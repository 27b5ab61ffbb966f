"""Configurable transformer backbone shared by all objectives."""
from .config import SIZES, PUBLISHED_SIZES, BackboneConfig, published_analog, param_count
from .model import Backbone, ConditioningInput, KVCache, build, timestep_features

__all__ = ["SIZES", "PUBLISHED_SIZES", "Backbone", "BackboneConfig", "ConditioningInput", "KVCache",
           "build", "published_analog", "param_count", "timestep_features"]
