"""Canonical float32 text rendering.

One rendering is used everywhere a parameter value becomes text: the params
table, program serialization, and the emitted script. Scientific notation
with nine fractional digits, e.g. 0.1 -> 1.000000000e-01. That is at least
the nine significant decimal digits that guarantee a float32 -> text ->
float32 round trip recovers the exact bit pattern, subnormals and signed
zeros included.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import FormatError


def render_f32(value) -> str:
    """Render one finite float32 as canonical scientific text."""
    v = float(value)
    if not math.isfinite(v):
        raise FormatError(f"cannot render non-finite value {v!r}")
    return f"{v:.9e}"


def parse_f32(text: str) -> np.float32:
    """Parse canonical text back to float32, rejecting non-finite results."""
    try:
        v = float(text)
    except ValueError as e:
        raise FormatError(f"bad float literal {text!r}") from e
    out = np.float32(v)
    if not np.isfinite(out):
        raise FormatError(f"value {text!r} is not finite in float32")
    return out
