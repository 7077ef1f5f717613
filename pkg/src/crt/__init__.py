"""Segment-recurrent transformer laboratory.

A small numpy library implementing a transformer that reads short segments
with a single persistent memory vector carried between them by a recurrent
cell, plus the analysis tooling to account for its compute cost and to
measure how gradients propagate through that memory.
"""

from .tensor import Tape, Tensor

__all__ = ["Tape", "Tensor"]
