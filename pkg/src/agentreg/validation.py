"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError, DimensionError
from .synth import SyntheticPair


def check_pairs(x) -> list:
    """Validate a pair collection for fit/predict: nonempty, correct type,
    one shared feature width, finite features."""
    if isinstance(x, SyntheticPair):
        x = [x]
    pairs = list(x)
    if not pairs:
        raise DimensionError("need at least one pair")
    for i, pair in enumerate(pairs):
        if not isinstance(pair, SyntheticPair):
            raise ContractViolationError(
                f"element {i} is {type(pair).__name__}, expected SyntheticPair")
        if not np.all(np.isfinite(pair.base_features)):
            raise ContractViolationError(f"pair {i} has non-finite image features")
        if not np.all(np.isfinite(pair.superpoint_features)):
            raise ContractViolationError(f"pair {i} has non-finite point features")
    width = {p.base_features.shape[2] for p in pairs}
    if len(width) != 1:
        raise DimensionError(f"pairs disagree on feature width: {sorted(width)}")
    pt_width = {p.superpoint_features.shape[1] for p in pairs}
    if pt_width != width:
        raise DimensionError("image and point feature widths differ")
    return pairs
