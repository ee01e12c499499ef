"""Instance-level uncertainty scores.

Classification entropy, RIoU-based localization uncertainty, the
aspect-weighted localization/orientation fusion used to supervise an
uncertainty head, and that head's binary cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import HALF_PI, RotatedBox, angular_deviation, riou

EPS_PROB = 1e-6
PROB_FLOOR = 1e-12
EPS_LOG = 1e-7


def as_distribution(probs: Sequence[float]) -> np.ndarray:
    """Validate a category distribution and return it as a float array."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise InvalidInputError(f"distribution needs at least 2 categories, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > EPS_PROB:
        raise InvalidInputError(f"probabilities must sum to 1, got {p.sum():.9g}")
    return p


def normalize_scores(scores: Sequence[float]) -> np.ndarray:
    """Turn per-category sigmoid scores into a distribution.

    Raises on all-zero input; the sum is floored at 1e-12.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size < 2 or not np.all(np.isfinite(s)) or np.any(s < 0):
        raise InvalidInputError("scores must be a finite non-negative vector of length >= 2")
    total = s.sum()
    if total <= 0:
        raise InvalidInputError("cannot normalize an all-zero score vector")
    return s / max(total, PROB_FLOOR)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy in nats of an ``(N, C)`` array of distributions."""
    keep = probs >= PROB_FLOOR
    logs = np.log(np.where(keep, probs, 1.0))
    return -np.where(keep, probs * logs, 0.0).sum(axis=1)


def normalized_entropy_rows(probs: np.ndarray) -> np.ndarray:
    return np.minimum(entropy_rows(probs) / math.log(probs.shape[1]), 1.0)


def classification_uncertainty(probs: Sequence[float]) -> float:
    """Shannon entropy in nats, with ``0 * ln 0 = 0``."""
    p = as_distribution(probs)
    return float(entropy_rows(p[None, :])[0])


def normalized_classification_uncertainty(probs: Sequence[float]) -> float:
    p = as_distribution(probs)
    return float(normalized_entropy_rows(p[None, :])[0])


def localization_uncertainty(pred: RotatedBox, gt: RotatedBox) -> float:
    return 1.0 - riou(pred, gt)


def aspect_weight(w_o: float, h_o: float, beta: float = 0.5) -> float:
    """Weight on the localization term; elongated objects lean on orientation."""
    if not (w_o > 0 and h_o > 0):
        raise InvalidInputError(f"object dimensions must be positive, got w={w_o}, h={h_o}")
    if beta < 0:
        raise InvalidInputError(f"beta must be >= 0, got {beta}")
    return math.exp(-beta * abs(math.log(h_o / w_o)))


@dataclass(frozen=True)
class LocOrientTarget:
    u_loc: float
    u_theta: float
    w_aspect: float
    u_fused: float


def loc_orient_target(pred: RotatedBox, gt: RotatedBox, beta: float = 0.5) -> LocOrientTarget:
    """Fused localization/orientation uncertainty against a known ground truth.

    The aspect weight is taken from the ground-truth object's dimensions.
    """
    u_loc = localization_uncertainty(pred, gt)
    u_theta = angular_deviation(pred, gt)
    w = aspect_weight(gt.w, gt.h, beta)
    fused = w * u_loc + (1.0 - w) * (u_theta / HALF_PI)
    return LocOrientTarget(u_loc, u_theta, w, min(max(fused, 0.0), 1.0))


def lup_loss(predicted, target, reduction: str = "mean") -> float:
    """Binary cross-entropy between predicted and target uncertainties.

    Accepts scalars or equal-length sequences. ``reduction`` is ``"mean"`` or
    ``"sum"`` over instances.
    """
    p = np.atleast_1d(np.asarray(predicted, dtype=float))
    t = np.atleast_1d(np.asarray(target, dtype=float))
    if p.shape != t.shape:
        raise InvalidInputError(f"shape mismatch: {p.shape} vs {t.shape}")
    for name, arr in (("predicted", p), ("target", t)):
        if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
            raise InvalidInputError(f"{name} values must lie in [0, 1]")
    p = np.clip(p, EPS_LOG, 1.0 - EPS_LOG)
    losses = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if reduction == "sum":
        return float(losses.sum())
    if reduction == "mean":
        return float(losses.mean())
    raise InvalidInputError(f"unknown reduction {reduction!r}")
