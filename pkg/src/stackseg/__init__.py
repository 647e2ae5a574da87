"""stackseg: volumetric segmentation from a frozen 2D transformer backbone.

The encoder stays frozen; adaptation happens through shared low-rank
increments on the query/value projections, depth-mixing 3D adapters
wrapped around attention, and a trainable resolution-recovering decoder.
Everything runs on a small from-scratch autodiff engine and synthetic
volumetric data, so the full pipeline is verifiable on a desktop CPU.
"""

__version__ = "0.1.0"
