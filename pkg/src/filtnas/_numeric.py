import math

import numpy as np


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy rounds ties to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_half_away_int(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))
