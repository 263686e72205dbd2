"""Groupwise diffeomorphic registration with a joint shape and appearance model."""
from .field import Deformation, OrientedVolume
from .fit import FitConfig, FitResult, PyramidSchedule, fit_groupwise, fit_to_template

__all__ = ["Deformation", "OrientedVolume", "FitConfig", "FitResult", "PyramidSchedule",
           "fit_groupwise", "fit_to_template"]
__version__ = "0.1.0"
