"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import re

import numpy as np

from .exceptions import ContractViolation


def check_image(x, name="image") -> np.ndarray:
    """Return ``x`` as a float64 ``(H, W, C)`` array in [0, 1], C in {1, 3}.

    uint8 input is scaled by 1/255. Float input must already be unit range.
    """
    arr = np.asarray(x)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    elif not np.issubdtype(arr.dtype, np.number) or np.iscomplexobj(arr):
        raise ContractViolation(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ContractViolation(f"{name} must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractViolation(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractViolation(f"{name} intensities must lie in [0, 1]")
    return arr


def check_count(value, name, minimum=0) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ContractViolation(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_nonnegative(value, name) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ContractViolation(f"{name} must be a finite number >= 0, got {value!r}")
    return value


def parse_bit_range(text) -> tuple[int, int]:
    """Parse ``"6..16"``, ``"6:16"``, ``"6,16"`` or a 2-sequence into ``(lo, hi)``."""
    if isinstance(text, str):
        parts = [p for p in re.split(r"\.\.|[:,\-]", text.strip()) if p]
        if len(parts) != 2:
            raise ContractViolation(f"bit range must look like LO..HI, got {text!r}")
        try:
            lo, hi = (int(p) for p in parts)
        except ValueError:
            raise ContractViolation(f"bit range must be integers, got {text!r}") from None
    else:
        lo, hi = (int(v) for v in text)
    if not 1 <= lo <= hi <= 16:
        raise ContractViolation(f"bit range {lo}..{hi} must satisfy 1 <= lo <= hi <= 16")
    return lo, hi


def parse_list(text, kind=float) -> list:
    try:
        return [kind(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise ContractViolation(f"cannot parse {text!r} as a comma-separated list") from None
