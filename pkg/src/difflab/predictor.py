"""The three ways of predicting the clean sample and min-loss head selection.

* ``D`` - the network outputs ``x0`` directly.
* ``V`` - the network outputs ``v = sqrt(ab) eps - sqrt(1 - ab) x0``.
* ``A`` - the network outputs the injected noise ``eps``.
"""

from __future__ import annotations

import enum
import warnings

import numpy as np

from difflab.schedule import Schedule, _col

__all__ = [
    "PredictionType",
    "AmplificationWarning",
    "MixedSelectionError",
    "SELECTION_PRIORITY",
    "parse_pred_type",
    "make_target",
    "recover_x0",
    "amplification_factor",
    "mixed_select",
    "mixed_select_rows",
]

# recovering x0 from an eps prediction divides by sqrt(alpha_bar)
AMPLIFICATION_FLOOR = 1e-12


class PredictionType(enum.IntEnum):
    D = 0
    V = 1
    A = 2

    @property
    def letter(self) -> str:
        return self.name.lower()


# tie-break order for mixed selection, most preferred first
SELECTION_PRIORITY = (PredictionType.A, PredictionType.V, PredictionType.D)


class AmplificationWarning(RuntimeWarning):
    """x0 recovered from an eps prediction where alpha_bar is vanishingly small."""


class MixedSelectionError(FloatingPointError):
    def __init__(self, head: PredictionType):
        super().__init__(f"non-finite loss on head {head.letter!r}")
        self.head = head


def parse_pred_type(value) -> PredictionType:
    if isinstance(value, PredictionType):
        return value
    if isinstance(value, (int, np.integer)):
        return PredictionType(int(value))
    key = str(value).strip().lower()
    for pt in PredictionType:
        if key in (pt.letter, pt.name.lower()):
            return pt
    aliases = {"x0": PredictionType.D, "eps": PredictionType.A, "epsilon": PredictionType.A,
               "velocity": PredictionType.V}
    if key in aliases:
        return aliases[key]
    raise ValueError(f"unknown prediction type {value!r}")


def make_target(pt: PredictionType, s: Schedule, t, x0, eps) -> np.ndarray:
    """Regression target for head ``pt`` at timestep(s) ``t``."""
    s.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if pt is PredictionType.D:
        return x0.copy()
    if pt is PredictionType.A:
        return eps.copy()
    ab = s.alpha_bar[np.asarray(t)]
    return _col(np.sqrt(ab), x0) * eps - _col(np.sqrt(1.0 - ab), x0) * x0


def amplification_factor(s: Schedule, t) -> np.ndarray:
    """How much an eps-prediction error is scaled when mapped to x0."""
    ab = s.alpha_bar[np.asarray(t)]
    return np.sqrt(1.0 - ab) / np.sqrt(ab)


def recover_x0(pt: PredictionType, s: Schedule, t, x_t, y) -> np.ndarray:
    """Estimate of ``x0`` implied by prediction ``y`` of type ``pt``.

    Affine in ``y`` for fixed ``(x_t, t)``.  An ``A`` recovery where
    ``alpha_bar_t < 1e-12`` emits :class:`AmplificationWarning` and still
    returns the (huge-variance) estimate.
    """
    s.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pt is PredictionType.D:
        return y.copy()
    ab = s.alpha_bar[np.asarray(t)]
    if pt is PredictionType.V:
        return _col(np.sqrt(ab), x_t) * x_t - _col(np.sqrt(1.0 - ab), x_t) * y
    if np.any(ab < AMPLIFICATION_FLOOR):
        warnings.warn(f"eps->x0 recovery with alpha_bar below {AMPLIFICATION_FLOOR:g}",
                      AmplificationWarning, stacklevel=2)
    return (x_t - _col(np.sqrt(1.0 - ab), x_t) * y) / _col(np.sqrt(ab), x_t)


def mixed_select(losses) -> PredictionType:
    """Head with the smallest loss; ``losses`` is indexed by ``PredictionType``.

    Ties go to A, then V, then D.
    """
    losses = [float(v) for v in losses]
    if len(losses) != 3:
        raise ValueError("mixed_select needs exactly three losses (d, v, a)")
    for pt in PredictionType:
        if not np.isfinite(losses[pt]):
            raise MixedSelectionError(pt)
    best = SELECTION_PRIORITY[0]
    for pt in SELECTION_PRIORITY[1:]:
        if losses[pt] < losses[best]:
            best = pt
    return best


def mixed_select_rows(losses: np.ndarray) -> np.ndarray:
    """Row-wise :func:`mixed_select` for an ``(n, 3)`` array; returns codes."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2 or losses.shape[1] != 3:
        raise ValueError("expected an (n, 3) loss array")
    bad = ~np.isfinite(losses)
    if bad.any():
        raise MixedSelectionError(PredictionType(int(np.argwhere(bad)[0, 1])))
    order = np.array([int(pt) for pt in SELECTION_PRIORITY])
    # argmin returns the first minimum, so columns in priority order settle ties
    return order[np.argmin(losses[:, order], axis=1)]
