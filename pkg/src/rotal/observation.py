"""Detection matching, AP/mAP50, model-state abilities and state-aware scoring."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import RotatedBox, riou
from .uncertainty import as_distribution

DIMENSIONS = ("cls", "loc_theta", "inter", "intra")


@dataclass(frozen=True)
class GroundTruthInstance:
    image_id: str
    instance_id: str
    category_id: int
    box: RotatedBox

    def __post_init__(self) -> None:
        if not isinstance(self.box, RotatedBox):
            raise InvalidInputError("ground truth box must be a RotatedBox")
        if isinstance(self.category_id, bool) or int(self.category_id) != self.category_id or self.category_id < 0:
            raise InvalidInputError(f"invalid category_id {self.category_id!r}")
        object.__setattr__(self, "category_id", int(self.category_id))


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    image_id: str
    instance_id: Optional[str]
    box: RotatedBox
    probs: np.ndarray
    feature: np.ndarray
    pred_loc_unc: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.box, RotatedBox):
            raise InvalidInputError("prediction box must be a RotatedBox")
        object.__setattr__(self, "probs", as_distribution(self.probs))
        f = np.asarray(self.feature, dtype=float)
        if f.ndim != 1 or f.size < 1 or not np.all(np.isfinite(f)):
            raise InvalidInputError("feature must be a finite non-empty vector")
        object.__setattr__(self, "feature", f)
        u = float(self.pred_loc_unc)
        if not 0.0 <= u <= 1.0:
            raise InvalidInputError(f"pred_loc_unc must lie in [0, 1], got {u}")
        object.__setattr__(self, "pred_loc_unc", u)
        object.__setattr__(self, "_category", int(np.argmax(self.probs)))
        object.__setattr__(self, "_confidence", float(self.probs[self._category]))

    @property
    def confidence(self) -> float:
        return self._confidence

    @property
    def category(self) -> int:
        return self._category


@dataclass(frozen=True)
class AbilityVector:
    a_cls: float
    a_loc: float
    a_inter: float
    a_intra: float
    rare_categories: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        for v in self.as_tuple():
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise InvalidInputError(f"ability values must lie in [0, 1], got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.a_cls, self.a_loc, self.a_inter, self.a_intra)

    @property
    def a_bar(self) -> float:
        return sum(self.as_tuple()) / 4.0

    def to_json(self) -> dict:
        return {
            "a_cls": self.a_cls,
            "a_loc": self.a_loc,
            "a_inter": self.a_inter,
            "a_intra": self.a_intra,
            "a_bar": self.a_bar,
            "weights": list(mso_weights(self)),
            "rare_categories": list(self.rare_categories),
        }

    @classmethod
    def from_json(cls, data: dict) -> AbilityVector:
        try:
            return cls(
                float(data["a_cls"]),
                float(data["a_loc"]),
                float(data["a_inter"]),
                float(data["a_intra"]),
                tuple(int(c) for c in data.get("rare_categories", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed ability record: {exc}") from None


@dataclass(frozen=True)
class ScoreBreakdown:
    u_cls_norm: float
    u_loc_theta: float
    d_inter: float
    d_intra_norm: float
    weights: tuple[float, float, float, float]
    s: float
    s_final: float
    pseudo_category: int

    @property
    def scores(self) -> tuple[float, float, float, float]:
        return (self.u_cls_norm, self.u_loc_theta, self.d_inter, self.d_intra_norm)


# ---------------------------------------------------------------------------
# matching and AP


def _sort_key_pred(p: InstancePrediction, idx: int):
    return (-p.confidence, p.instance_id or "", idx)


def _group_gts(gts: Sequence[GroundTruthInstance]) -> dict[str, list[int]]:
    by_image: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)
    return by_image


def match_predictions(
    preds: Sequence[InstancePrediction],
    gts: Sequence[GroundTruthInstance],
    iou_threshold: float = 0.5,
    class_aware: bool = True,
) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching.

    Predictions are visited by confidence (descending, ties by instance id);
    each takes the still-unmatched ground truth in its image with the highest
    RIoU at or above ``iou_threshold``. Returns ``(pred_idx, gt_idx, iou)``
    triples in visiting order.
    """
    by_image = _group_gts(gts)
    order = sorted(range(len(preds)), key=lambda i: _sort_key_pred(preds[i], i))
    taken: set[int] = set()
    matches = []
    for i in order:
        p = preds[i]
        cat = p.category
        best = None
        for j in by_image.get(p.image_id, ()):
            if j in taken:
                continue
            g = gts[j]
            if class_aware and g.category_id != cat:
                continue
            iou = riou(p.box, g.box)
            if iou < iou_threshold or iou <= 0.0:
                continue
            key = (-iou, g.instance_id)
            if best is None or key < best[0]:
                best = (key, j, iou)
        if best is not None:
            taken.add(best[1])
            matches.append((i, best[1], best[2]))
    return matches


def _ap_from_flags(flags: Sequence[bool], n_gt: int) -> float:
    if n_gt == 0:
        raise InvalidInputError("AP undefined without ground truth")
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def per_category_ap(
    preds: Sequence[InstancePrediction],
    gts: Sequence[GroundTruthInstance],
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """All-point interpolated AP for every category present in ``gts``."""
    n_gt: dict[int, int] = defaultdict(int)
    for g in gts:
        n_gt[g.category_id] += 1
    matched = {i for i, _, _ in match_predictions(preds, gts, iou_threshold, class_aware=True)}
    by_cat: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(preds):
        by_cat[p.category].append(i)
    out = {}
    for c in sorted(n_gt):
        idx = sorted(by_cat.get(c, ()), key=lambda i: _sort_key_pred(preds[i], i))
        out[c] = _ap_from_flags([i in matched for i in idx], n_gt[c])
    return out


def average_precision(
    preds: Sequence[InstancePrediction],
    gts: Sequence[GroundTruthInstance],
    category: int,
    iou_threshold: float = 0.5,
) -> Optional[float]:
    """AP of one category; ``None`` when the category has no ground truth."""
    aps = per_category_ap(preds, gts, iou_threshold)
    return aps.get(int(category))


def mean_average_precision(preds, gts, iou_threshold: float = 0.5) -> float:
    aps = per_category_ap(preds, gts, iou_threshold)
    if not aps:
        raise InvalidInputError("mAP undefined for an empty ground-truth set")
    return float(np.mean(list(aps.values())))


def localization_matches(
    preds: Sequence[InstancePrediction], gts: Sequence[GroundTruthInstance]
) -> dict[int, float]:
    """Class-agnostic, threshold-free greedy pairing; maps gt index to RIoU."""
    by_image = _group_gts(gts)
    pairs = []
    for i, p in enumerate(preds):
        for j in by_image.get(p.image_id, ()):
            iou = riou(p.box, gts[j].box)
            if iou > 0.0:
                pairs.append((-iou, gts[j].instance_id, p.instance_id or "", i, j))
    pairs.sort()
    used_p: set[int] = set()
    out: dict[int, float] = {}
    for neg_iou, _, _, i, j in pairs:
        if i in used_p or j in out:
            continue
        used_p.add(i)
        out[j] = -neg_iou
    return out


def mean_iou(preds, gts) -> float:
    if not gts:
        raise InvalidInputError("mean IoU undefined for an empty ground-truth set")
    return sum(localization_matches(preds, gts).values()) / len(gts)


def rare_categories(
    present: Sequence[int], labeled_counts: dict[int, int], rare_quantile: float = 1 / 3
) -> tuple[int, ...]:
    """Categories whose labeled count is at or below the given quantile."""
    if not 0.0 <= rare_quantile <= 1.0:
        raise InvalidInputError(f"rare_quantile must lie in [0, 1], got {rare_quantile}")
    present = sorted(set(present))
    if not present:
        return ()
    counts = np.array([labeled_counts.get(c, 0) for c in present], dtype=float)
    cut = float(np.quantile(counts, rare_quantile))
    return tuple(c for c, n in zip(present, counts) if n <= cut)


def ability_vector(
    eval_preds: Sequence[InstancePrediction],
    eval_gts: Sequence[GroundTruthInstance],
    labeled_counts: dict[int, int],
    rare_quantile: float = 1 / 3,
    inter_aggregate: str = "mean",
    iou_threshold: float = 0.5,
) -> AbilityVector:
    """Observe classification, localization, rare-category and intra-category ability."""
    if not eval_gts:
        raise InvalidInputError("ability observation needs a non-empty evaluation set")
    if inter_aggregate not in ("mean", "sum"):
        raise InvalidInputError(f"inter_aggregate must be 'mean' or 'sum', got {inter_aggregate!r}")
    aps = per_category_ap(eval_preds, eval_gts, iou_threshold)
    a_cls = float(np.mean(list(aps.values())))

    a_loc = sum(localization_matches(eval_preds, eval_gts).values()) / len(eval_gts)

    rare = rare_categories(list(aps), labeled_counts, rare_quantile)
    rare_aps = [aps[c] for c in rare]
    total = float(np.sum(rare_aps))
    a_inter = total / len(rare_aps) if inter_aggregate == "mean" else total

    by_cat: dict[int, list[tuple[bool, float]]] = defaultdict(list)
    for i, j, _ in match_predictions(eval_preds, eval_gts, iou_threshold, class_aware=False):
        p = eval_preds[i]
        c = eval_gts[j].category_id
        by_cat[c].append((p.category == c, p.confidence))
    acc_terms = 0.0
    for c in aps:
        hits = by_cat.get(c)
        if not hits:
            continue
        acc = sum(ok for ok, _ in hits) / len(hits)
        var = float(np.var([conf for _, conf in hits]))
        acc_terms += acc * math.exp(-var)
    a_intra = acc_terms / len(aps)

    clamp = lambda v: min(max(float(v), 0.0), 1.0)  # noqa: E731
    return AbilityVector(clamp(a_cls), clamp(a_loc), clamp(a_inter), clamp(a_intra), rare)


# ---------------------------------------------------------------------------
# state-aware scoring


def mso_weights(a: AbilityVector) -> tuple[float, float, float, float]:
    """Softmax of ``1 - A_i``: weaker dimensions get larger weights."""
    e = [math.exp(1.0 - v) for v in a.as_tuple()]
    total = math.fsum(e)
    w = [x / total for x in e]
    return (w[0], w[1], w[2], w[3])


def composite_score(u: Sequence[float], a: AbilityVector) -> float:
    if len(u) != 4:
        raise InvalidInputError(f"expected 4 scores, got {len(u)}")
    for v in u:
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise InvalidInputError(f"scores must lie in [0, 1], got {tuple(u)}")
    w = mso_weights(a)
    return min(max(math.fsum(wi * ui for wi, ui in zip(w, u)), 0.0), 1.0)


def final_score(s: float, a_bar: float) -> float:
    """Interpolate between ``S`` and ``1 - S`` by overall ability."""
    for name, v in (("S", s), ("a_bar", a_bar)):
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
    # algebraically a_bar*s + (1-a_bar)*(1-s); this form is monotone in s
    # under rounding, so rankings never flip spuriously
    return (2.0 * a_bar - 1.0) * s + (1.0 - a_bar)
