"""Spherical-harmonic weather forecasting with adversarial training, at desk scale."""

from .spherical import Grid, SphericalTransform, sht_analysis, sht_synthesis
from .weatherdata import Dataset, VariableRegistry, default_registry, read_dataset, synth_generate, write_dataset

__version__ = "0.1.0"

__all__ = ["Grid", "SphericalTransform", "sht_analysis", "sht_synthesis", "Dataset", "VariableRegistry",
           "default_registry", "read_dataset", "synth_generate", "write_dataset"]
