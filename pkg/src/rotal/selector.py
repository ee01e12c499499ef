"""Candidate scoring, budgeted greedy selection and the active-learning loop.

One round observes the model state on an evaluation set, scores every
unlabeled instance, picks ``budget`` of them one at a time (updating the
picked category's prototype and count before the next pick), annotates the
picks through an oracle and asks the model adapter to retrain.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from .config import RunConfig
from .diversity import MISSING_PROTOTYPE_SCORE, PrototypeStore, init_prototypes
from .errors import ContractViolation, InvalidInputError
from .observation import (
    AbilityVector,
    GroundTruthInstance,
    InstancePrediction,
    ScoreBreakdown,
    ability_vector,
    mso_weights,
)
from .serialization import config_hash, load_ground_truth, load_predictions, read_json, write_json
from .uncertainty import normalized_entropy_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelPool:
    labeled: frozenset
    unlabeled: frozenset
    round: int = 0
    initial: frozenset = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "labeled", frozenset(self.labeled))
        object.__setattr__(self, "unlabeled", frozenset(self.unlabeled))
        if self.initial is None:
            object.__setattr__(self, "initial", self.labeled)
        else:
            object.__setattr__(self, "initial", frozenset(self.initial))
        if self.labeled & self.unlabeled:
            raise InvalidInputError("labeled and unlabeled sets overlap")
        if not self.initial <= self.labeled:
            raise InvalidInputError("initial labeled ids must stay labeled")
        if self.round < 0:
            raise InvalidInputError("round must be >= 0")

    @classmethod
    def from_ids(cls, all_ids, labeled) -> LabelPool:
        all_ids = frozenset(all_ids)
        labeled = frozenset(labeled)
        if not labeled <= all_ids:
            raise InvalidInputError("labeled ids must be a subset of the dataset")
        return cls(labeled, all_ids - labeled)

    @property
    def all_ids(self) -> frozenset:
        return self.labeled | self.unlabeled


@dataclass(frozen=True)
class SelectionRecord:
    instance_id: str
    rank: int
    breakdown: ScoreBreakdown

    def to_json(self) -> dict:
        b = self.breakdown
        return {
            "rank": self.rank,
            "instance_id": self.instance_id,
            "pseudo_category": b.pseudo_category,
            "u_cls_norm": b.u_cls_norm,
            "u_loc_theta": b.u_loc_theta,
            "d_inter": b.d_inter,
            "d_intra_norm": b.d_intra_norm,
            "weights": list(b.weights),
            "s": b.s,
            "s_final": b.s_final,
        }


class ModelAdapter(Protocol):
    """What the selection loop needs from a detector.

    ``predict`` must return exactly one prediction per requested id and be
    deterministic for a given pool and seed. ``ground_truth`` is the
    annotation oracle. ``heldout`` is only used with ``mso_eval="heldout"``.
    """

    def predict(self, ids: Sequence[str]) -> list[InstancePrediction]: ...

    def ground_truth(self, ids: Sequence[str]) -> list[GroundTruthInstance]: ...

    def heldout(self) -> tuple[list[InstancePrediction], list[GroundTruthInstance]]: ...

    def retrain(self, pool: LabelPool) -> None: ...


# ---------------------------------------------------------------------------
# scoring


def _inter(counts: np.ndarray, gamma: float) -> np.ndarray:
    z = np.minimum(gamma * counts.astype(float) - 1.0, 700.0)
    return 1.0 / (1.0 + np.exp(z))


def _intra(feats: np.ndarray, norms: np.ndarray, proto: Optional[np.ndarray]) -> np.ndarray:
    if proto is None:
        return np.full(len(feats), MISSING_PROTOTYPE_SCORE)
    pn = np.sqrt((proto * proto).sum())
    if pn == 0:
        raise InvalidInputError("prototype has zero norm")
    cos = (feats * proto).sum(axis=1) / (norms * pn)
    return np.clip(1.0 - cos, 0.0, 2.0) / 2.0


def _combine(u_cls, u_loc, d_inter, d_intra, weights, a_bar):
    s = weights[0] * u_cls + weights[1] * u_loc + weights[2] * d_inter + weights[3] * d_intra
    s = np.clip(s, 0.0, 1.0)
    return s, (2.0 * a_bar - 1.0) * s + (1.0 - a_bar)


class _CandidateTable:
    """Column-oriented candidate scores, kept in instance-id order."""

    def __init__(self, preds: Sequence[InstancePrediction], store: PrototypeStore, ability: AbilityVector, gamma: float):
        if not preds:
            raise InvalidInputError("no candidates to score")
        ids = [p.instance_id for p in preds]
        if any(i is None for i in ids):
            raise InvalidInputError("candidates need instance ids")
        order = sorted(range(len(preds)), key=lambda i: ids[i])
        self.preds = [preds[i] for i in order]
        self.ids = [ids[i] for i in order]
        if len(set(self.ids)) != len(self.ids):
            raise InvalidInputError("duplicate candidate instance ids")
        self.store = store
        self.gamma = gamma
        self.weights = mso_weights(ability)
        self.a_bar = ability.a_bar
        probs = np.stack([p.probs for p in self.preds])
        if probs.shape[1] != store.num_categories:
            raise InvalidInputError(
                f"predictions carry {probs.shape[1]} categories, store has {store.num_categories}"
            )
        self.feats = np.stack([p.feature for p in self.preds])
        self.norms = np.sqrt((self.feats * self.feats).sum(axis=1))
        if np.any(self.norms == 0):
            raise InvalidInputError("candidate feature with zero norm")
        self.u_cls = normalized_entropy_rows(probs)
        self.u_loc = np.array([p.pred_loc_unc for p in self.preds])
        self.pseudo = np.argmax(probs, axis=1)
        self.d_inter = np.empty(len(self.preds))
        self.d_intra = np.empty(len(self.preds))
        self.s = np.empty(len(self.preds))
        self.s_final = np.empty(len(self.preds))
        for c in np.unique(self.pseudo):
            self.rescore(int(c), np.flatnonzero(self.pseudo == c))

    def rescore(self, category: int, idx: np.ndarray) -> None:
        self.d_inter[idx] = _inter(np.array([self.store.count(category)]), self.gamma)[0]
        self.d_intra[idx] = _intra(self.feats[idx], self.norms[idx], self.store.prototype(category))
        s, sf = _combine(self.u_cls[idx], self.u_loc[idx], self.d_inter[idx], self.d_intra[idx], self.weights, self.a_bar)
        self.s[idx] = s
        self.s_final[idx] = sf

    def breakdown(self, i: int) -> ScoreBreakdown:
        return ScoreBreakdown(
            float(self.u_cls[i]),
            float(self.u_loc[i]),
            float(self.d_inter[i]),
            float(self.d_intra[i]),
            self.weights,
            float(self.s[i]),
            float(self.s_final[i]),
            int(self.pseudo[i]),
        )


def score_candidate(
    pred: InstancePrediction, store: PrototypeStore, ability: AbilityVector, gamma: Optional[float] = None
) -> ScoreBreakdown:
    """Score one unlabeled instance against the current store and ability."""
    if pred.instance_id is None:
        pred = dataclasses.replace(pred, instance_id="")
    table = _CandidateTable([pred], store, ability, store.gamma if gamma is None else gamma)
    return table.breakdown(0)


def greedy_select(
    candidates: Sequence[InstancePrediction],
    store: PrototypeStore,
    ability: AbilityVector,
    budget: int,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
) -> tuple[list[SelectionRecord], PrototypeStore]:
    """Pick ``budget`` candidates.

    ``greedy`` takes the best remaining candidate (``s_final`` desc, then
    ``S`` desc, then instance id asc), folds it into its pseudo-category's
    prototype and count, and rescores that category before the next pick.
    ``static`` ranks once by the initial scores; ``random`` draws uniformly
    from ``rng``. The input store is left untouched; the updated copy is
    returned.
    """
    if budget < 1:
        raise InvalidInputError(f"budget must be >= 1, got {budget}")
    if not candidates:
        raise InvalidInputError("empty candidate set")
    if budget > len(candidates):
        raise InvalidInputError(f"budget {budget} exceeds {len(candidates)} candidates")
    store = store.copy()
    table = _CandidateTable(candidates, store, ability, store.gamma)
    n = len(table.ids)
    records: list[SelectionRecord] = []

    def commit(i: int) -> None:
        records.append(SelectionRecord(table.ids[i], len(records) + 1, table.breakdown(i)))
        store.update(int(table.pseudo[i]), table.feats[i])

    if mode == "greedy":
        remaining = np.ones(n, dtype=bool)
        for _ in range(budget):
            sf = np.where(remaining, table.s_final, -np.inf)
            best = np.flatnonzero(sf == sf.max())
            if len(best) > 1:
                s = table.s[best]
                best = best[s == s.max()]
            i = int(best[0])
            commit(i)
            remaining[i] = False
            c = int(table.pseudo[i])
            same = np.flatnonzero(remaining & (table.pseudo == c))
            if len(same):
                table.rescore(c, same)
    elif mode == "static":
        order = np.lexsort((np.arange(n), -table.s, -table.s_final))
        for i in order[:budget]:
            commit(int(i))
    elif mode == "random":
        if rng is None:
            raise InvalidInputError("random selection needs an rng")
        for i in rng.choice(n, size=budget, replace=False):
            commit(int(i))
    else:
        raise InvalidInputError(f"unknown selection mode {mode!r}")
    return records, store


# ---------------------------------------------------------------------------
# annotation and rounds

Oracle = Union[Mapping[str, GroundTruthInstance], Callable[[str], GroundTruthInstance]]


@dataclass(frozen=True)
class LabelDelta:
    instance_id: str
    pseudo_category: int
    true_category: int


def annotate(
    pool: LabelPool,
    selections: Sequence[SelectionRecord],
    oracle: Oracle,
    store: PrototypeStore,
) -> tuple[LabelPool, PrototypeStore, list[LabelDelta]]:
    """Move picks into the labeled set and fix counts of mis-predicted categories.

    Prototype EMA state is kept as is; only counts are corrected (one
    decrement on the pseudo-category, one increment on the true one).
    """
    lookup = oracle.__getitem__ if isinstance(oracle, Mapping) else oracle
    ids = [r.instance_id for r in selections]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate ids in selection")
    for i in ids:
        if i not in pool.unlabeled:
            raise InvalidInputError(f"{i!r} is not an unlabeled instance")
    store = store.copy()
    deltas = []
    for rec in selections:
        try:
            gt = lookup(rec.instance_id)
        except KeyError:
            raise ContractViolation(f"oracle has no label for {rec.instance_id!r}") from None
        true_c = gt.category_id
        pseudo = rec.breakdown.pseudo_category
        if true_c != pseudo:
            store.adjust_count(pseudo, -1)
            store.adjust_count(true_c, +1)
        deltas.append(LabelDelta(rec.instance_id, pseudo, true_c))
    picked = frozenset(ids)
    new_pool = LabelPool(pool.labeled | picked, pool.unlabeled - picked, pool.round, pool.initial)
    return new_pool, store, deltas


@dataclass
class RoundReport:
    round: int
    ability: AbilityVector
    selections: list[SelectionRecord]
    deltas: list[LabelDelta]
    labeled_count: int

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "ability": self.ability.to_json(),
            "selections": [r.to_json() for r in self.selections],
            "corrections": [
                {"instance_id": d.instance_id, "pseudo_category": d.pseudo_category, "true_category": d.true_category}
                for d in self.deltas
                if d.pseudo_category != d.true_category
            ],
            "labeled_count": self.labeled_count,
        }


def _checked_predictions(adapter: ModelAdapter, ids: Sequence[str]) -> list[InstancePrediction]:
    preds = adapter.predict(ids)
    got = [p.instance_id for p in preds]
    if len(got) != len(ids) or set(got) != set(ids):
        missing = sorted(set(ids) - set(got))[:5]
        raise ContractViolation(
            f"adapter returned {len(got)} predictions for {len(ids)} ids (missing e.g. {missing})"
        )
    return preds


def observe(pool: LabelPool, store: PrototypeStore, adapter: ModelAdapter, config: RunConfig) -> AbilityVector:
    """Model-state observation on the configured evaluation set."""
    if config.mso_eval == "heldout":
        preds, gts = adapter.heldout()
    else:
        ids = sorted(pool.initial if config.mso_eval == "initial" else pool.labeled)
        if not ids:
            raise InvalidInputError("evaluation set is empty")
        preds = _checked_predictions(adapter, ids)
        gts = adapter.ground_truth(ids)
    return ability_vector(preds, gts, store.counts, config.rare_quantile, config.inter_aggregate)


def run_round(
    pool: LabelPool,
    store: PrototypeStore,
    adapter: ModelAdapter,
    config: RunConfig,
    rng: Optional[np.random.Generator] = None,
    state_path: Optional[Path] = None,
) -> tuple[RoundReport, LabelPool, PrototypeStore]:
    ability = observe(pool, store, adapter, config)
    log.info("round %d: a_bar=%.4f abilities=%s", pool.round, ability.a_bar, ability.as_tuple())
    records: list[SelectionRecord] = []
    deltas: list[LabelDelta] = []
    new_pool, new_store = pool, store
    budget = min(config.budget, len(pool.unlabeled))
    if budget > 0:
        ids = sorted(pool.unlabeled)
        candidates = _checked_predictions(adapter, ids)
        records, new_store = greedy_select(candidates, store, ability, budget, config.selection, rng)
        picked = [r.instance_id for r in records]
        oracle = {g.instance_id: g for g in adapter.ground_truth(picked)}
        new_pool, new_store, deltas = annotate(pool, records, oracle, new_store)
    new_pool = LabelPool(new_pool.labeled, new_pool.unlabeled, pool.round + 1, pool.initial)
    if budget > 0:
        adapter.retrain(new_pool)
    report = RoundReport(pool.round, ability, records, deltas, len(new_pool.labeled))
    if state_path is not None:
        save_state(state_path, new_pool, new_store, ability, config)
    return report, new_pool, new_store


@dataclass
class LoopReport:
    rounds: list[RoundReport] = field(default_factory=list)
    final_ability: Optional[AbilityVector] = None
    pool: Optional[LabelPool] = None
    store: Optional[PrototypeStore] = None

    @property
    def trajectory(self) -> list[AbilityVector]:
        out = [r.ability for r in self.rounds]
        if self.final_ability is not None:
            out.append(self.final_ability)
        return out

    def to_json(self) -> dict:
        return {
            "rounds": [r.to_json() for r in self.rounds],
            "final_ability": None if self.final_ability is None else self.final_ability.to_json(),
            "a_bar_trajectory": [a.a_bar for a in self.trajectory],
            "labeled_count": None if self.pool is None else len(self.pool.labeled),
        }


def run_loop(
    pool: LabelPool,
    store: PrototypeStore,
    adapter: ModelAdapter,
    config: RunConfig,
    rounds: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    observe_final: bool = True,
) -> LoopReport:
    rounds = config.rounds if rounds is None else rounds
    report = LoopReport(pool=pool, store=store)
    for _ in range(rounds):
        rr, pool, store = run_round(pool, store, adapter, config, rng)
        report.rounds.append(rr)
    report.pool, report.store = pool, store
    if observe_final and rounds > 0:
        report.final_ability = observe(pool, store, adapter, config)
    return report


# ---------------------------------------------------------------------------
# persisted state


def save_state(path, pool: LabelPool, store: PrototypeStore, ability: Optional[AbilityVector], config: RunConfig) -> None:
    write_json(path, state_to_json(pool, store, ability, config))


def state_to_json(pool: LabelPool, store: PrototypeStore, ability: Optional[AbilityVector], config: RunConfig) -> dict:
    cfg = config.to_dict()
    return {
        "round": pool.round,
        "labeled": sorted(pool.labeled),
        "initial": sorted(pool.initial),
        "num_categories": store.num_categories,
        "category_counts": {str(c): n for c, n in store.counts.items()},
        "prototypes": {str(c): p for c, p in sorted(store.prototypes.items())},
        "ability": None if ability is None else ability.to_json(),
        "config": cfg,
        "config_hash": config_hash(cfg),
    }


def load_state(path, config: Optional[RunConfig] = None):
    """Read ``state.json``; returns ``(round, labeled, initial, store, ability)``."""
    data = read_json(path)
    try:
        num_categories = int(data["num_categories"])
        labeled = frozenset(data["labeled"])
        initial = frozenset(data.get("initial", data["labeled"]))
        round_ = int(data["round"])
        counts = {int(k): int(v) for k, v in data["category_counts"].items()}
        protos = data.get("prototypes", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractViolation(f"{path}: malformed state ({exc})") from None
    alpha = config.alpha if config else 0.9
    gamma = config.gamma if config else 0.01
    entries = {str(c): {"count": n, "prototype": protos.get(str(c))} for c, n in counts.items()}
    try:
        store = PrototypeStore.from_json(entries, num_categories, alpha, gamma)
    except InvalidInputError as exc:
        raise ContractViolation(f"{path}: {exc}") from None
    ability = AbilityVector.from_json(data["ability"]) if data.get("ability") else None
    return round_, labeled, initial, store, ability


# ---------------------------------------------------------------------------
# file-based adapter


class FileAdapter:
    """Adapter over prediction dumps written by an external detector.

    ``predictions`` covers candidate (unlabeled) instances,
    ``eval_predictions`` covers the evaluation set. Retraining happens
    outside; ``on_retrain`` is called with the new pool if given.
    """

    def __init__(
        self,
        predictions_path,
        gt_path,
        eval_predictions_path=None,
        heldout_predictions_path=None,
        heldout_gt_path=None,
        keep: Optional[set] = None,
        on_retrain: Optional[Callable[[LabelPool], None]] = None,
    ):
        self._preds = {p.instance_id: p for p in load_predictions(predictions_path, keep)}
        if eval_predictions_path is not None:
            for p in load_predictions(eval_predictions_path):
                self._preds.setdefault(p.instance_id, p)
        self._gt = {g.instance_id: g for g in load_ground_truth(gt_path)} if gt_path else {}
        self._heldout_paths = (heldout_predictions_path, heldout_gt_path)
        self._on_retrain = on_retrain

    def predict(self, ids):
        return [self._preds[i] for i in ids if i in self._preds]

    def ground_truth(self, ids):
        missing = [i for i in ids if i not in self._gt]
        if missing:
            raise ContractViolation(f"no ground truth for {missing[:5]}")
        return [self._gt[i] for i in ids]

    def heldout(self):
        pp, gp = self._heldout_paths
        if pp is None or gp is None:
            raise ContractViolation("held-out evaluation requested but no held-out files configured")
        return load_predictions(pp), load_ground_truth(gp)

    def retrain(self, pool):
        if self._on_retrain is not None:
            self._on_retrain(pool)


def initial_store(labeled_gts: Sequence[GroundTruthInstance], preds: Sequence[InstancePrediction],
                  num_categories: int, config: RunConfig) -> PrototypeStore:
    """Prototypes from true categories of labeled instances and their predicted features."""
    feats = {p.instance_id: p.feature for p in preds}
    missing = [g.instance_id for g in labeled_gts if g.instance_id not in feats]
    if missing:
        raise ContractViolation(f"no features for labeled instances {missing[:5]}")
    return init_prototypes(((g.category_id, feats[g.instance_id]) for g in labeled_gts),
                           num_categories, config.alpha, config.gamma)
