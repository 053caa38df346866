"""Synthetic methane-plume hyperspectral scenes and the retrieval chain:
matched-filter inversion, plume segmentation and IME emission-rate estimation,
plus the multi-task loss algebra and evaluation metrics."""

__version__ = "0.1.0"

from .core import (AbsorptionTable, ConcentrationMap, HyperCube, PlumeInstance,
                   PlumeSnapshot, enclosing_box, ime)

__all__ = ["AbsorptionTable", "ConcentrationMap", "HyperCube", "PlumeInstance",
           "PlumeSnapshot", "enclosing_box", "ime", "__version__"]
