"""Lead-window bookkeeping shared by training, prediction, and verification.

A prediction window starting at hour h spans forecast hours [h, h+3],
clipped to the day; the first two hours of each day are treated as model
spin-up and never contribute features. Windows keep only starts with at
least two usable hours, matching the shortened windows at the start of the
day (2 and 3 feature vectors) and the classifier's 2-to-4 arity contract.
"""

from .griddata import WINDOW_LEN

SPINUP_HOURS = 2


def window_hours(start, hours_per_day):
    """Forecast hours feeding the window anchored at ``start``."""
    return [h for h in range(start, start + WINDOW_LEN)
            if SPINUP_HOURS <= h < hours_per_day]


def window_starts(hours_per_day):
    """All window-start hours with enough usable forecast hours."""
    return [h for h in range(hours_per_day) if len(window_hours(h, hours_per_day)) >= 2]


def valid_hours(hours_per_day):
    """Forecast hours usable as model inputs (spin-up removed)."""
    return list(range(SPINUP_HOURS, hours_per_day))
