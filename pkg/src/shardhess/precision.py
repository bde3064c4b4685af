"""Emulated storage precisions.

All arithmetic runs in float64; a precision mode only decides how values are
rounded when they are *stored*. This keeps an exact fp64 reference available
for every experiment while reproducing the noise floor of a narrower format.

bf16 keeps 8 significant bits (7 stored + implicit), fp32 keeps 24. Rounding
is round-to-nearest-even in both cases.
"""

from __future__ import annotations

import numpy as np

PRECISIONS = ("fp64", "fp32", "bf16")

# Unit values quoted for the step-size rules. fp32 uses 2**-23 and bf16 2**-8,
# i.e. the conventions under which fp32 ~ 1.2e-7 and bf16 ~ 3.9e-3.
MACHINE_EPS = {
    "fp64": 2.0**-52,
    "fp32": 2.0**-23,
    "bf16": 2.0**-8,
}

_MANTISSA_BITS = {"fp64": 53, "fp32": 24, "bf16": 8}


def check_precision(mode: str) -> str:
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {PRECISIONS}")
    return mode


def machine_eps(mode: str) -> float:
    return MACHINE_EPS[check_precision(mode)]


def mantissa_bits(mode: str) -> int:
    return _MANTISSA_BITS[check_precision(mode)]


def round_mantissa(x, bits: int) -> np.ndarray:
    """Round to ``bits`` significant bits, ties to even. Exponent range is unbounded."""
    x = np.asarray(x, dtype=np.float64)
    m, e = np.frexp(x)
    # m in [0.5, 1): scaling by 2**bits puts the kept bits left of the point,
    # np.rint rounds half to even.
    return np.ldexp(np.rint(np.ldexp(m, bits)), e - bits)


def quantize(x, mode: str) -> np.ndarray:
    """Return ``x`` rounded to the storage format ``mode`` (as float64)."""
    check_precision(mode)
    x = np.asarray(x, dtype=np.float64)
    if mode == "fp64":
        return x
    if mode == "fp32":
        return x.astype(np.float32).astype(np.float64)
    return round_mantissa(x, 8)
