"""Deterministic synthetic scenes and a responsive synthetic detector.

The detector's skill is factored by category (classification) and by
difficulty tercile (box regression). Retraining reads only labeled counts,
never selection scores, so any gain an acquisition strategy shows has to
come through which instances it chose to label.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .diversity import init_prototypes
from .errors import InvalidInputError
from .geometry import RotatedBox
from .observation import (
    GroundTruthInstance,
    InstancePrediction,
    localization_matches,
    per_category_ap,
)
from .selector import LabelPool, LoopReport, run_loop
from .uncertainty import loc_orient_target

log = logging.getLogger(__name__)

STRATEGIES = {"active": "greedy", "static": "static", "random": "random"}


@dataclass(frozen=True)
class SimConfig:
    num_categories: int = 15
    num_instances: int = 20_000
    num_test: int = 4_000
    num_heldout: int = 200
    feature_dim: int = 32
    zipf_exponent: float = 1.1
    modes: int = 3
    instances_per_image: int = 20
    canvas: float = 1024.0
    size_min: float = 8.0
    size_max: float = 256.0
    init_fraction: float = 0.01
    budget: int = 200
    rounds: int = 2
    # detector dynamics
    base_skill: float = 0.2
    lambda_cls: float = 0.05
    lambda_loc: float = 0.02
    sigma_lup: float = 0.05
    train_fit: float = 0.5
    peak_strength: float = 6.0
    logit_noise: float = 1.0
    center_noise: float = 0.12
    size_noise: float = 0.15
    angle_noise: float = 0.25
    mode_scale: float = 0.8
    feature_noise: float = 0.3
    pred_feature_noise: float = 0.1
    # selection hyperparameters
    gamma: float = 0.01
    beta: float = 0.5
    alpha: float = 0.9
    rare_quantile: float = 1 / 3
    mso_eval: str = "initial"
    inter_aggregate: str = "mean"

    def __post_init__(self) -> None:
        if self.num_categories < 2:
            raise InvalidInputError("need at least 2 categories")
        if self.num_instances < self.num_categories:
            raise InvalidInputError("need at least one instance per category")
        if self.num_test < 1 or self.feature_dim < 1 or self.modes < 1 or self.instances_per_image < 1:
            raise InvalidInputError("num_test, feature_dim, modes and instances_per_image must be >= 1")
        if not 0 <= self.init_fraction <= 1:
            raise InvalidInputError("init_fraction must lie in [0, 1]")
        if not 0 < self.size_min <= self.size_max or self.canvas <= 0:
            raise InvalidInputError("invalid size range or canvas")
        if not 0 <= self.base_skill <= 1 or not 0 <= self.train_fit <= 1:
            raise InvalidInputError("base_skill and train_fit must lie in [0, 1]")
        if self.budget < 0 or self.rounds < 0 or self.sigma_lup < 0:
            raise InvalidInputError("budget, rounds and sigma_lup must be >= 0")
        self.run_config()  # validates the selection hyperparameters

    def run_config(self, selection: str = "greedy", seed: int = 0) -> RunConfig:
        return RunConfig(
            gamma=self.gamma,
            beta=self.beta,
            alpha=self.alpha,
            rounds=self.rounds,
            budget=self.budget,
            rare_quantile=self.rare_quantile,
            selection=selection,
            mso_eval=self.mso_eval,
            inter_aggregate=self.inter_aggregate,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SimConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidInputError(f"unknown simulator config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            default = getattr(cls, key)
            if isinstance(default, str):
                ok = isinstance(value, str)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not ok:
                raise InvalidInputError(f"simulator config key {key!r}: invalid value {value!r}")
            kwargs[key] = type(default)(value)
        return cls(**kwargs)


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of a master seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Split:
    prefix: str
    category: np.ndarray
    boxes: np.ndarray  # (n, 5) cx, cy, w, h, theta
    difficulty: np.ndarray
    features: np.ndarray
    per_image: int

    def __len__(self) -> int:
        return len(self.category)

    def instance_id(self, i: int) -> str:
        return f"{self.prefix}{i:06d}"

    def image_id(self, i: int) -> str:
        return f"{self.prefix}img{i // self.per_image:05d}"

    @property
    def ids(self) -> list[str]:
        return [self.instance_id(i) for i in range(len(self))]

    def box(self, i: int) -> RotatedBox:
        return RotatedBox(*self.boxes[i])

    def ground_truth(self, i: int) -> GroundTruthInstance:
        return GroundTruthInstance(self.image_id(i), self.instance_id(i), int(self.category[i]), self.box(i))


@dataclass
class SyntheticDataset:
    config: SimConfig
    seed: int
    train: Split
    test: Split
    heldout: Split
    archetypes: np.ndarray
    confusion: np.ndarray
    initial_labeled: list[str]

    def split_of(self, instance_id: str) -> tuple[Split, int]:
        for split in (self.train, self.test, self.heldout):
            if instance_id.startswith(split.prefix) and instance_id[len(split.prefix):].isdigit():
                i = int(instance_id[len(split.prefix):])
                if i < len(split):
                    return split, i
        raise KeyError(instance_id)


def zipf_probs(num_categories: int, exponent: float) -> np.ndarray:
    w = np.arange(1, num_categories + 1, dtype=float) ** -exponent
    return w / w.sum()


def _make_split(cfg: SimConfig, rng: np.random.Generator, n: int, prefix: str,
                archetypes: np.ndarray, offsets: np.ndarray) -> Split:
    C, D = cfg.num_categories, cfg.feature_dim
    cats = rng.choice(C, size=n, p=zipf_probs(C, cfg.zipf_exponent))
    cx = rng.uniform(0, cfg.canvas, n)
    cy = rng.uniform(0, cfg.canvas, n)
    lo, hi = math.log(cfg.size_min), math.log(cfg.size_max)
    w = np.exp(rng.uniform(lo, hi, n))
    h = np.exp(rng.uniform(lo, hi, n))
    theta = rng.uniform(-math.pi / 2, math.pi / 2, n)
    difficulty = rng.beta(2.0, 2.0, n)
    mode = rng.integers(0, cfg.modes, n)
    raw = archetypes[cats] + cfg.mode_scale * offsets[cats, mode] + cfg.feature_noise * rng.standard_normal((n, D)) / math.sqrt(D)
    feats = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    boxes = np.stack([cx, cy, w, h, theta], axis=1)
    return Split(prefix, cats, boxes, difficulty, feats, cfg.instances_per_image)


def generate_dataset(config: SimConfig, seed: int) -> SyntheticDataset:
    """Long-tailed synthetic scenes with a sparse initial labeled set.

    The initial labeled set is a uniform ``init_fraction`` sample topped up
    so every category has at least one labeled instance.
    """
    cfg = config
    C, D = cfg.num_categories, cfg.feature_dim
    rng = stream(seed, "dataset")
    archetypes = rng.standard_normal((C, D))
    archetypes /= np.linalg.norm(archetypes, axis=1, keepdims=True)
    offsets = rng.standard_normal((C, cfg.modes, D)) / math.sqrt(D)
    shift = rng.integers(1, C, size=C)
    confusion = (np.arange(C) + shift) % C

    train = _make_split(cfg, rng, cfg.num_instances, "i", archetypes, offsets)
    # every category must exist in the pool for the one-per-category top-up
    missing = np.setdiff1d(np.arange(C), train.category)
    if len(missing):
        slots = rng.choice(cfg.num_instances, size=len(missing), replace=False)
        train.category[slots] = missing
    test = _make_split(cfg, stream(seed, "test"), cfg.num_test, "t", archetypes, offsets)
    heldout = _make_split(cfg, stream(seed, "heldout"), max(cfg.num_heldout, 1), "h", archetypes, offsets)

    init_rng = stream(seed, "init")
    n_init = int(round(cfg.init_fraction * cfg.num_instances))
    chosen = set(init_rng.choice(cfg.num_instances, size=n_init, replace=False).tolist())
    for c in range(C):
        if not any(train.category[i] == c for i in chosen):
            members = np.flatnonzero(train.category == c)
            chosen.add(int(init_rng.choice(members)))
    initial = sorted(train.instance_id(i) for i in chosen)
    return SyntheticDataset(cfg, seed, train, test, heldout, archetypes, confusion, initial)


# ---------------------------------------------------------------------------
# detector


@dataclass(frozen=True)
class DetectorState:
    cls_skill: np.ndarray  # per category
    reg_skill: np.ndarray  # per difficulty tercile
    sigma_lup: float
    seed: int
    round: int = 0


def difficulty_tercile(d: np.ndarray) -> np.ndarray:
    return np.minimum((np.asarray(d) * 3).astype(int), 2)


def initial_state(config: SimConfig, seed: int) -> DetectorState:
    return DetectorState(
        np.full(config.num_categories, config.base_skill),
        np.full(3, config.base_skill),
        config.sigma_lup,
        seed,
    )


def retrain(state: DetectorState, labeled_categories: np.ndarray, labeled_difficulty: np.ndarray,
            config: SimConfig, round_: Optional[int] = None) -> DetectorState:
    """Skills saturate exponentially in the labeled counts of their slice."""
    base = config.base_skill
    n_c = np.bincount(np.asarray(labeled_categories, dtype=int), minlength=config.num_categories)
    n_t = np.bincount(difficulty_tercile(labeled_difficulty), minlength=3)
    cls = 1.0 - (1.0 - base) * np.exp(-config.lambda_cls * n_c)
    reg = 1.0 - (1.0 - base) * np.exp(-config.lambda_loc * n_t)
    return DetectorState(cls, reg, state.sigma_lup, state.seed, state.round if round_ is None else round_)


class _NoiseTable:
    """Per-instance noise rows for one (split, round); rows are indexed by instance."""

    def __init__(self, seed: int, split: Split, round_: int, C: int, D: int):
        rng = stream(seed, f"detector-{split.prefix}", round_)
        n = len(split)
        self.u = rng.random(n)
        self.logits = rng.standard_normal((n, C))
        self.box = rng.standard_normal((n, 5))
        self.feat = rng.standard_normal((n, D))
        self.lup = rng.standard_normal(n)


def detector_predict(
    state: DetectorState,
    split: Split,
    idx: Sequence[int],
    config: SimConfig,
    confusion: np.ndarray,
    labeled_mask: Optional[np.ndarray] = None,
    noise: Optional[_NoiseTable] = None,
) -> list[InstancePrediction]:
    """Predictions for instances ``idx`` of ``split`` under ``state``.

    Instances the detector was trained on (``labeled_mask``) get their skill
    lifted by ``train_fit`` toward 1.
    """
    cfg = config
    idx = np.asarray(idx, dtype=int)
    if noise is None:
        noise = _NoiseTable(state.seed, split, state.round, cfg.num_categories, cfg.feature_dim)
    cats = split.category[idx]
    d = split.difficulty[idx]
    q_cls = state.cls_skill[cats]
    q_reg = state.reg_skill[difficulty_tercile(d)]
    if labeled_mask is not None:
        fit = labeled_mask[idx]
        q_cls = np.where(fit, 1 - (1 - q_cls) * (1 - cfg.train_fit), q_cls)
        q_reg = np.where(fit, 1 - (1 - q_reg) * (1 - cfg.train_fit), q_reg)

    # classification: correct with probability skill * (1 - d/2)
    q_eff = q_cls * (1.0 - 0.5 * d)
    correct = noise.u[idx] < q_eff
    peak = np.where(correct, cats, confusion[cats])
    strength = cfg.peak_strength * np.where(correct, q_eff, 0.5 * q_eff)
    logits = cfg.logit_noise * noise.logits[idx]
    rows = np.arange(len(idx))
    logits[rows, peak] += strength
    # the peak category always carries the largest probability
    top = np.argmax(logits, axis=1)
    tmp = logits[rows, top].copy()
    logits[rows, top] = logits[rows, peak]
    logits[rows, peak] = tmp
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)

    # regression noise grows with (1 - skill) * (1 + difficulty)
    gt = split.boxes[idx]
    scale = (1.0 - q_reg) * (1.0 + d)
    zb = noise.box[idx]
    side = np.sqrt(gt[:, 2] * gt[:, 3])
    pb = np.empty_like(gt)
    pb[:, 0] = gt[:, 0] + cfg.center_noise * scale * side * zb[:, 0]
    pb[:, 1] = gt[:, 1] + cfg.center_noise * scale * side * zb[:, 1]
    pb[:, 2] = gt[:, 2] * np.exp(cfg.size_noise * scale * zb[:, 2])
    pb[:, 3] = gt[:, 3] * np.exp(cfg.size_noise * scale * zb[:, 3])
    pb[:, 4] = gt[:, 4] + cfg.angle_noise * scale * zb[:, 4]

    feats = split.features[idx] + cfg.pred_feature_noise * noise.feat[idx] / math.sqrt(cfg.feature_dim)
    lup_noise = state.sigma_lup * noise.lup[idx]

    out = []
    for k, i in enumerate(idx):
        pred_box = RotatedBox(*pb[k])
        gt_box = RotatedBox(*gt[k])
        target = 0.0 if scale[k] == 0 else loc_orient_target(pred_box, gt_box, cfg.beta).u_fused
        u = min(max(target + lup_noise[k], 0.0), 1.0)
        out.append(InstancePrediction(split.image_id(i), split.instance_id(i), pred_box, probs[k], feats[k], u))
    return out


class SimulatedDetector:
    """Model adapter backed by the synthetic detector."""

    def __init__(self, dataset: SyntheticDataset, pool: LabelPool):
        self.dataset = dataset
        self.config = dataset.config
        self.state = initial_state(self.config, dataset.seed)
        self._labeled = np.zeros(len(dataset.train), dtype=bool)
        self._noise: dict[tuple[str, int], _NoiseTable] = {}
        self.retrain(pool)

    def _noise_for(self, split: Split) -> _NoiseTable:
        key = (split.prefix, self.state.round)
        if key not in self._noise:
            self._noise = {k: v for k, v in self._noise.items() if k[1] == self.state.round}
            self._noise[key] = _NoiseTable(self.dataset.seed, split, self.state.round,
                                           self.config.num_categories, self.config.feature_dim)
        return self._noise[key]

    def predict(self, ids):
        by_split: dict[str, list[tuple[int, int]]] = {}
        splits = {}
        for pos, iid in enumerate(ids):
            split, i = self.dataset.split_of(iid)
            splits[split.prefix] = split
            by_split.setdefault(split.prefix, []).append((pos, i))
        out: list = [None] * len(ids)
        for prefix, items in by_split.items():
            split = splits[prefix]
            mask = self._labeled if split is self.dataset.train else None
            preds = detector_predict(self.state, split, [i for _, i in items], self.config,
                                     self.dataset.confusion, mask, self._noise_for(split))
            for (pos, _), p in zip(items, preds):
                out[pos] = p
        return out

    def ground_truth(self, ids):
        out = []
        for iid in ids:
            split, i = self.dataset.split_of(iid)
            out.append(split.ground_truth(i))
        return out

    def heldout(self):
        split = self.dataset.heldout
        ids = split.ids
        return self.predict(ids), self.ground_truth(ids)

    def retrain(self, pool: LabelPool) -> None:
        train = self.dataset.train
        self._labeled[:] = False
        for iid in pool.labeled:
            _, i = self.dataset.split_of(iid)
            self._labeled[i] = True
        self.state = retrain(self.state, train.category[self._labeled], train.difficulty[self._labeled],
                             self.config, pool.round)

    def evaluate_test(self) -> dict:
        split = self.dataset.test
        ids = split.ids
        preds = self.predict(ids)
        gts = self.ground_truth(ids)
        aps = per_category_ap(preds, gts, 0.5)
        miou = sum(localization_matches(preds, gts).values()) / len(gts)
        return {"map50": float(np.mean(list(aps.values()))), "ap": {str(c): v for c, v in aps.items()},
                "mean_iou": miou}


# ---------------------------------------------------------------------------
# experiments


def gini(counts: Sequence[float]) -> float:
    x = np.sort(np.asarray(counts, dtype=float))
    n = len(x)
    if n == 0 or x.sum() == 0:
        return 0.0
    cum = np.cumsum(x)
    return float((n + 1 - 2 * np.sum(cum) / cum[-1]) / n)


def run_seed(config: SimConfig, strategy: str, seed: int) -> dict:
    if strategy not in STRATEGIES:
        raise InvalidInputError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    ds = generate_dataset(config, seed)
    pool = LabelPool.from_ids(ds.train.ids, ds.initial_labeled)
    adapter = SimulatedDetector(ds, pool)
    run_cfg = config.run_config(STRATEGIES[strategy], seed)
    init_preds = adapter.predict(sorted(pool.labeled))
    store = init_prototypes(
        ((g.category_id, p.feature) for g, p in zip(adapter.ground_truth([p.instance_id for p in init_preds]), init_preds)),
        config.num_categories, config.alpha, config.gamma,
    )
    report: LoopReport = run_loop(pool, store, adapter, run_cfg, rng=stream(seed, "random-strategy"))
    metrics = adapter.evaluate_test()
    labeled_idx = [ds.split_of(i)[1] for i in report.pool.labeled]
    counts = np.bincount(ds.train.category[labeled_idx], minlength=config.num_categories)
    selected_idx = [ds.split_of(r.instance_id)[1] for rr in report.rounds for r in rr.selections]
    sel_counts = np.bincount(ds.train.category[selected_idx].astype(int), minlength=config.num_categories)
    return {
        "seed": seed,
        "map50": metrics["map50"],
        "ap": metrics["ap"],
        "mean_iou": metrics["mean_iou"],
        "abilities": [a.to_json() for a in report.trajectory],
        "a_bar_trajectory": [a.a_bar for a in report.trajectory],
        "labeled_count": len(report.pool.labeled),
        "labeled_per_category": counts.tolist(),
        "selected_per_category": sel_counts.tolist(),
        "selected_mean_difficulty": float(np.mean(ds.train.difficulty[selected_idx])) if selected_idx else None,
        "gini": gini(counts),
    }


def run_experiment(strategy: str, seeds: Sequence[int], config: SimConfig = SimConfig()) -> dict:
    """Run one acquisition strategy over several seeds and summarize mAP50."""
    if not seeds:
        raise InvalidInputError("at least one seed is required")
    per_seed = []
    for seed in seeds:
        log.info("simulating strategy=%s seed=%d", strategy, seed)
        per_seed.append(run_seed(config, strategy, int(seed)))
    maps = np.array([r["map50"] for r in per_seed])
    return {
        "strategy": strategy,
        "seeds": [int(s) for s in seeds],
        "config": config.to_dict(),
        "per_seed": per_seed,
        "mean_map50": float(maps.mean()),
        "var_map50": float(maps.var()),
    }


def trajectories_csv(report: dict) -> str:
    lines = ["strategy,seed,step,a_cls,a_loc,a_inter,a_intra,a_bar"]
    for r in report["per_seed"]:
        for step, a in enumerate(r["abilities"]):
            lines.append(
                f"{report['strategy']},{r['seed']},{step},"
                + ",".join(f"{a[k]:.9g}" for k in ("a_cls", "a_loc", "a_inter", "a_intra", "a_bar"))
            )
    return "\n".join(lines) + "\n"
