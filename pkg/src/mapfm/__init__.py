"""Online vectorized HD-map construction at desk scale: synthetic multi-camera
scenes in, polyline maps and BEV segmentation out."""

__version__ = "0.1.0"
