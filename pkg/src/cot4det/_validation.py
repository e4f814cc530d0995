"""Parameter checks shared by the estimators and the command line."""

from __future__ import annotations

import math
import numbers

from .parser import POLICIES
from .prompts import GRANULARITIES

SETTING_CHOICES = {"gt": "ground_truth_categories", "full": "full_category"}


def check_rate(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be a number in [0, 1], got {value!r}")
    return float(value)


def check_non_negative(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not math.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")
    return float(value)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_policy(policy: str) -> str:
    return check_choice(policy, POLICIES, "policy")


def check_granularity(granularity: str) -> str:
    return check_choice(granularity, GRANULARITIES, "granularity")


def check_setting(setting: str) -> str:
    """Accept the short CLI names as well as the full setting names."""
    if setting in SETTING_CHOICES:
        return SETTING_CHOICES[setting]
    return check_choice(setting, set(SETTING_CHOICES.values()), "setting")
