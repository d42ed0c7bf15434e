"""Staff-gauge water level reading: classical waterline detection, scale-gap
calibration, multimodal-model reading extraction and evaluation."""

from gaugeread.raster import FilterWindow, GradientField, Raster

__all__ = ["FilterWindow", "GradientField", "Raster"]
__version__ = "0.1.0"
