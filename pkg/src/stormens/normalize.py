"""Per-predictor normalizations and their exact inverses.

Three methods cover all predictors: a log transform ln(1+x) for the heavy
tailed explicit diagnostics plus CAPE/CIN, standardization for the
remaining environmental fields, and [0,1] feature scaling for the static
geographic inputs. CIN is converted to its magnitude before the log
transform and converted back on inversion.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSample, NegativeLogInput
from .predictors import NORMALIZATION, PredictorId

_LOG_EPS = -1e-9  # tolerance for "nonnegative" log inputs


@dataclass(frozen=True)
class NormalizerSpec:
    predictor: PredictorId
    method: str  # log | standardize | minmax
    mean: float = 0.0
    std: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    fitted_on: str = ""


def _to_magnitude(spec, x):
    # CIN arrives physically signed (<= 0); the predictor is its magnitude
    if spec.predictor == PredictorId.CIN:
        return -np.asarray(x, dtype=float)
    return np.asarray(x, dtype=float)


def fit_normalizer(predictor, training_values, fitted_on=""):
    """Fit the Table-style normalizer for one predictor from raw values.

    Standardization stores the population mean/std of the sample; feature
    scaling stores the sample extremes; the log transform is parameter free
    but validates sign.
    """
    method = NORMALIZATION[PredictorId(predictor)]
    values = np.asarray(training_values, dtype=float).ravel()
    if values.size == 0:
        raise DegenerateSample(f"{predictor}: empty training sample")
    spec = NormalizerSpec(PredictorId(predictor), method, fitted_on=fitted_on)
    if method == "log":
        mag = _to_magnitude(spec, values)
        if mag.min() < _LOG_EPS:
            raise NegativeLogInput(f"{predictor}: negative values in log-transform sample")
        return spec
    if method == "standardize":
        mean = float(values.mean())
        std = float(values.std())  # population std, fixed for determinism
        if std == 0.0:
            raise DegenerateSample(f"{predictor}: zero std")
        return NormalizerSpec(spec.predictor, method, mean=mean, std=std, fitted_on=fitted_on)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        raise DegenerateSample(f"{predictor}: max == min")
    return NormalizerSpec(spec.predictor, method, lo=lo, hi=hi, fitted_on=fitted_on)


def apply_normalizer(spec, x):
    """Map raw values into normalized space."""
    if spec.method == "log":
        mag = _to_magnitude(spec, x)
        if mag.min() < _LOG_EPS:
            raise NegativeLogInput(f"{spec.predictor}: negative log-transform input")
        return np.log1p(np.maximum(mag, 0.0))
    x = np.asarray(x, dtype=float)
    if spec.method == "standardize":
        return (x - spec.mean) / spec.std
    return (x - spec.lo) / (spec.hi - spec.lo)


def invert_normalizer(spec, y):
    """Exact algebraic inverse of ``apply_normalizer``."""
    y = np.asarray(y, dtype=float)
    if spec.method == "log":
        mag = np.expm1(y)
        if spec.predictor == PredictorId.CIN:
            return -mag
        return mag
    if spec.method == "standardize":
        return y * spec.std + spec.mean
    return spec.lo + y * (spec.hi - spec.lo)


class NormalizerSet:
    """All fitted normalizers of an experiment, keyed by predictor."""

    def __init__(self, specs=None):
        self.specs = dict(specs or {})

    def __getitem__(self, predictor):
        return self.specs[PredictorId(predictor)]

    def __contains__(self, predictor):
        return PredictorId(predictor) in self.specs

    def add(self, spec):
        self.specs[spec.predictor] = spec

    def apply_stack(self, stack, channel_order):
        """Normalize a (..., n_channels) stack channel by channel."""
        out = np.empty(stack.shape, dtype=float)
        for i, pid in enumerate(channel_order):
            out[..., i] = apply_normalizer(self[pid], stack[..., i])
        return out

    def to_text(self):
        """key=value serialization, embedded in experiment checkpoints."""
        lines = ["format=stormens-normalizers-v1"]
        for pid in sorted(self.specs, key=lambda p: p.value):
            s = self.specs[pid]
            lines.append(
                f"{pid.value}: method={s.method} mean={s.mean!r} std={s.std!r} "
                f"lo={s.lo!r} hi={s.hi!r} fitted_on={s.fitted_on}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "format=stormens-normalizers-v1":
            raise ValueError("not a normalizer document")
        out = cls()
        for ln in lines[1:]:
            name, rest = ln.split(":", 1)
            kv = dict(item.split("=", 1) for item in rest.split())
            out.add(
                NormalizerSpec(
                    PredictorId(name.strip()),
                    kv["method"],
                    mean=float(kv["mean"]),
                    std=float(kv["std"]),
                    lo=float(kv["lo"]),
                    hi=float(kv["hi"]),
                    fitted_on=kv.get("fitted_on", ""),
                )
            )
        return out
