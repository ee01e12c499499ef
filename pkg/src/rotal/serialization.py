"""JSON/JSONL reading and writing with stable float formatting."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import InvalidInputError
from .geometry import box_from_json
from .observation import GroundTruthInstance, InstancePrediction

SIG_DIGITS = 9


def round_floats(obj):
    """Recursively round floats to 9 significant digits (round-trip stable)."""
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise InvalidInputError(f"cannot serialize non-finite float {x}")
        return float(f"{x:.{SIG_DIGITS}g}")
    if isinstance(obj, np.ndarray):
        return [round_floats(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(round_floats(obj), sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    text = json.dumps(round_floats(obj), sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InvalidInputError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def config_hash(config: dict) -> str:
    return hashlib.sha256(dumps(config).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# record schemas


def gt_to_json(g: GroundTruthInstance) -> dict:
    return {
        "image_id": g.image_id,
        "instance_id": g.instance_id,
        "category_id": g.category_id,
        "box": g.box.to_list(),
    }


def gt_from_json(rec: dict) -> GroundTruthInstance:
    try:
        return GroundTruthInstance(
            str(rec["image_id"]), str(rec["instance_id"]), rec["category_id"], box_from_json(rec["box"])
        )
    except KeyError as exc:
        raise InvalidInputError(f"missing field {exc}") from None
    except TypeError as exc:
        raise InvalidInputError(str(exc)) from None


def prediction_to_json(p: InstancePrediction) -> dict:
    return {
        "image_id": p.image_id,
        "instance_id": p.instance_id,
        "box": p.box.to_list(),
        "probs": p.probs,
        "feature": p.feature,
        "pred_loc_unc": p.pred_loc_unc,
    }


def prediction_from_json(rec: dict) -> InstancePrediction:
    try:
        iid = rec.get("instance_id")
        return InstancePrediction(
            str(rec["image_id"]),
            None if iid is None else str(iid),
            box_from_json(rec["box"]),
            rec["probs"],
            rec["feature"],
            rec.get("pred_loc_unc", 0.0),
        )
    except KeyError as exc:
        raise InvalidInputError(f"missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(str(exc)) from None


def _load(path, parse, keep=None) -> list:
    out = []
    for lineno, rec in iter_jsonl(path):
        if keep is not None and rec.get("instance_id") not in keep:
            continue
        try:
            out.append(parse(rec))
        except InvalidInputError as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
    return out


def load_predictions(path, keep: set | None = None) -> list[InstancePrediction]:
    """Stream a predictions file; with ``keep`` only those ids are parsed and retained."""
    return _load(path, prediction_from_json, keep)


def load_ground_truth(path) -> list[GroundTruthInstance]:
    gts = _load(path, gt_from_json)
    seen = set()
    for g in gts:
        if g.instance_id in seen:
            raise InvalidInputError(f"{path}: duplicate instance_id {g.instance_id!r}")
        seen.add(g.instance_id)
    return gts
