"""Desk-scale driving language: image and action tokens in one causal stream.

Submodules are imported on demand; ``import drivelm`` stays cheap so the CLI
can set BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
