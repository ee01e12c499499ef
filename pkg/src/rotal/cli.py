"""Command-line interface.

Exit codes: 0 success, 2 input/config error, 3 state-contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import SELECTION_MODES, RunConfig
from .errors import ContractViolation, InvalidInputError
from .geometry import RotatedBox, angular_deviation, riou
from .observation import AbilityVector, ability_vector, localization_matches, per_category_ap
from .selector import LabelPool, annotate, greedy_select, initial_store, load_state, state_to_json
from .serialization import (
    gt_to_json,
    iter_jsonl,
    load_ground_truth,
    load_predictions,
    prediction_from_json,
    prediction_to_json,
    read_json,
    write_json,
    write_jsonl,
)
from .simulator import STRATEGIES, SimConfig, SimulatedDetector, generate_dataset, run_experiment, trajectories_csv

CONFIG_ENV = "ROTAL_CONFIG"

log = logging.getLogger("rotal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _parse_box(text: str) -> RotatedBox:
    text = text.strip()
    try:
        values = json.loads(text) if text.startswith("[") else [float(v) for v in text.split(",")]
    except (ValueError, json.JSONDecodeError):
        raise InvalidInputError(f"cannot parse box {text!r}; expected 'cx,cy,w,h,theta'") from None
    if not isinstance(values, list) or len(values) != 5:
        raise InvalidInputError(f"box {text!r} must have 5 values")
    return RotatedBox.from_list(values)


def _run_config(args) -> RunConfig:
    data = {}
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        data = read_json(path)
        if not isinstance(data, dict):
            raise InvalidInputError(f"{path}: config must be a JSON object")
    for key in ("gamma", "beta", "alpha", "rounds", "budget", "rare_quantile", "selection", "mso_eval",
                "inter_aggregate", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"JSON config with flat keys (default: ${CONFIG_ENV})")
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rare-quantile", dest="rare_quantile", type=float)
    p.add_argument("--inter-aggregate", dest="inter_aggregate", choices=("mean", "sum"))
    p.add_argument("--seed", type=int)


# ---------------------------------------------------------------------------
# commands


def cmd_riou(args) -> int:
    a, b = _parse_box(args.a), _parse_box(args.b)
    print(f"riou={riou(a, b):.6f} dtheta={angular_deviation(a, b):.6f}")
    return 0


def _labeled_counts(state_path, gts) -> dict[int, int]:
    if state_path:
        data = read_json(state_path)
        try:
            return {int(k): int(v) for k, v in data["category_counts"].items()}
        except (KeyError, AttributeError, ValueError) as exc:
            raise ContractViolation(f"{state_path}: malformed category_counts ({exc})") from None
    counts: dict[int, int] = {}
    for g in gts:
        counts[g.category_id] = counts.get(g.category_id, 0) + 1
    return counts


def cmd_observe(args) -> int:
    config = _run_config(args)
    gts = load_ground_truth(args.gt)
    if not gts:
        raise InvalidInputError(f"{args.gt}: no ground truth records")
    preds = load_predictions(args.predictions)
    counts = _labeled_counts(args.state, gts)
    ability = ability_vector(preds, gts, counts, config.rare_quantile, config.inter_aggregate)
    out = ability.to_json()
    out["config"] = config.to_dict()
    write_json(args.out, out)
    return 0


def cmd_evaluate(args) -> int:
    gts = load_ground_truth(args.gt)
    if not gts:
        raise InvalidInputError(f"{args.gt}: no ground truth records")
    preds = load_predictions(args.predictions)
    aps = per_category_ap(preds, gts, args.iou_threshold)
    write_json(args.out, {
        "ap": {str(c): v for c, v in aps.items()},
        "map50": float(np.mean(list(aps.values()))),
        "mean_iou": sum(localization_matches(preds, gts).values()) / len(gts),
        "iou_threshold": args.iou_threshold,
        "num_gt": len(gts),
        "num_predictions": len(preds),
    })
    return 0


def cmd_init(args) -> int:
    config = _run_config(args)
    gts = load_ground_truth(args.gt)
    if not gts:
        raise InvalidInputError(f"{args.gt}: no ground truth records")
    by_id = {g.instance_id: g for g in gts}
    if args.labeled:
        labeled = [line.strip() for line in Path(args.labeled).read_text().splitlines() if line.strip()]
        unknown = [i for i in labeled if i not in by_id]
        if unknown:
            raise InvalidInputError(f"labeled ids not in ground truth: {unknown[:5]}")
    else:
        if args.fraction is None:
            raise InvalidInputError("give --labeled or --fraction")
        rng = np.random.default_rng(config.seed)
        ids = sorted(by_id)
        n = int(round(args.fraction * len(ids)))
        picked = {ids[i] for i in rng.choice(len(ids), size=n, replace=False)}
        for c in sorted({g.category_id for g in gts}):
            if not any(by_id[i].category_id == c for i in picked):
                members = sorted(i for i in ids if by_id[i].category_id == c)
                picked.add(members[int(rng.integers(len(members)))])
        labeled = sorted(picked)
    num_categories = args.num_categories or (max(g.category_id for g in gts) + 1)
    labeled_set = set(labeled)
    preds = load_predictions(args.predictions, keep=labeled_set)
    store = initial_store([by_id[i] for i in sorted(labeled_set)], preds, num_categories, config)
    pool = LabelPool.from_ids(by_id, labeled_set)
    state = state_to_json(pool, store, None, config)
    state["unlabeled"] = sorted(pool.unlabeled)
    write_json(args.out, state)
    return 0


def cmd_select(args) -> int:
    config = _run_config(args)
    if args.budget is not None:
        config = config.replace(budget=args.budget)
    if args.selection is not None:
        config = config.replace(selection=args.selection)
    state_data = read_json(args.state)
    round_, labeled, initial, store, ability = load_state(args.state, config)
    if args.ability:
        ability = AbilityVector.from_json(read_json(args.ability))
    if ability is None:
        raise ContractViolation("no ability vector: pass --ability or run observe and store it in the state")

    declared = state_data.get("unlabeled")
    if declared is not None:
        declared = set(declared)
    candidates = []
    seen = set()
    for lineno, rec in iter_jsonl(args.predictions):
        iid = rec.get("instance_id")
        if iid in labeled or (declared is not None and iid not in declared):
            continue
        try:
            p = prediction_from_json(rec)
        except InvalidInputError as exc:
            raise InvalidInputError(f"{args.predictions}:{lineno}: {exc}") from None
        if p.instance_id is None or p.instance_id in seen:
            raise InvalidInputError(f"{args.predictions}:{lineno}: missing or duplicate instance_id")
        seen.add(p.instance_id)
        candidates.append(p)
    unlabeled = declared if declared is not None else seen
    missing = sorted(unlabeled - seen)
    if missing:
        raise ContractViolation(f"no predictions for unlabeled ids {missing[:5]}")

    pool = LabelPool(labeled, frozenset(unlabeled), round_, initial)
    budget = min(config.budget, len(candidates))
    records = []
    if budget > 0:
        rng = np.random.default_rng([config.seed, round_])
        records, store = greedy_select(candidates, store, ability, budget, config.selection, rng)
        if args.gt:
            oracle = {g.instance_id: g for g in load_ground_truth(args.gt)}
            pool, store, _ = annotate(pool, records, oracle, store)
        else:
            picked = frozenset(r.instance_id for r in records)
            pool = LabelPool(pool.labeled | picked, pool.unlabeled - picked, pool.round, pool.initial)
    write_jsonl(args.out, [r.to_json() for r in records])
    pool = LabelPool(pool.labeled, pool.unlabeled, pool.round + 1, pool.initial)
    new_state = state_to_json(pool, store, ability, config)
    new_state["unlabeled"] = sorted(pool.unlabeled)
    write_json(args.state_out or args.state, new_state)
    return 0


def _sim_config(args) -> SimConfig:
    data = read_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise InvalidInputError("simulator config must be a JSON object")
    if args.budget is not None:
        data["budget"] = args.budget
    if getattr(args, "rounds", None) is not None:
        data["rounds"] = args.rounds
    return SimConfig.from_dict(data)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise InvalidInputError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise InvalidInputError("--seeds must list at least one seed")
    return seeds


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    report = run_experiment(args.strategy, _parse_seeds(args.seeds), cfg)
    write_json(args.out, report)
    if args.csv:
        Path(args.csv).write_text(trajectories_csv(report))
    return 0


def cmd_generate(args) -> int:
    """Dump a synthetic dataset and round-0 detector outputs as JSONL files."""
    cfg = _sim_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(cfg, args.seed)
    pool = LabelPool.from_ids(ds.train.ids, ds.initial_labeled)
    adapter = SimulatedDetector(ds, pool)
    ids = ds.train.ids
    preds = adapter.predict(ids)
    gts = adapter.ground_truth(ids)
    write_jsonl(out / "gt.jsonl", (gt_to_json(g) for g in gts))
    labeled = pool.labeled
    write_jsonl(out / "predictions.jsonl", (prediction_to_json(p) for p in preds if p.instance_id not in labeled))
    write_jsonl(out / "eval_predictions.jsonl", (prediction_to_json(p) for p in preds if p.instance_id in labeled))
    write_json(out / "sim_config.json", cfg.to_dict())
    (out / "labeled.txt").write_text("\n".join(sorted(labeled)) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rotal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("riou", help="RIoU and angular deviation of two boxes")
    p.add_argument("--a", required=True, help="cx,cy,w,h,theta (radians)")
    p.add_argument("--b", required=True, help="cx,cy,w,h,theta (radians)")
    p.set_defaults(func=cmd_riou)

    p = sub.add_parser("observe", help="observe model abilities on an evaluation set")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--state", help="state.json supplying labeled category counts")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_observe)

    p = sub.add_parser("init", help="create state.json from an initial labeled set")
    p.add_argument("--gt", required=True)
    p.add_argument("--predictions", required=True, help="predictions providing features of labeled instances")
    p.add_argument("--labeled", help="file with one labeled instance id per line")
    p.add_argument("--fraction", type=float, help="random labeled fraction (topped up to one per category)")
    p.add_argument("--num-categories", dest="num_categories", type=int)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("select", help="score candidates and select a budget")
    p.add_argument("--predictions", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="annotation oracle; corrects category counts of picks")
    p.add_argument("--ability", help="ability.json from 'observe' (defaults to the state's)")
    p.add_argument("--state-out", dest="state_out", help="write the advanced state here instead of in place")
    p.add_argument("--selection", choices=SELECTION_MODES)
    _add_run_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="per-category AP, mAP50 and mean IoU")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="run the synthetic active-learning experiment")
    p.add_argument("--config", help="sim_config.json")
    p.add_argument("--strategy", choices=sorted(STRATEGIES), default="active")
    p.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2,3,4")
    p.add_argument("--budget", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write ability trajectories as CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="export a synthetic dataset as JSONL files")
    p.add_argument("--config", help="sim_config.json")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"rotal: contract violation: {exc}", file=sys.stderr)
        return 3
    except (InvalidInputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"rotal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
