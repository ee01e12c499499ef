"""Small constructors and fixture loaders shared by the tests."""

import json
from pathlib import Path

import numpy as np

from rotal.diversity import PrototypeStore
from rotal.geometry import RotatedBox
from rotal.observation import AbilityVector, GroundTruthInstance, InstancePrediction
from rotal.serialization import load_predictions


def probs_for(category, confidence, num_categories):
    p = np.full(num_categories, (1.0 - confidence) / (num_categories - 1))
    p[category] = confidence
    return p


def gt(iid, category, box, image="img0"):
    return GroundTruthInstance(image, iid, category, RotatedBox(*box))


def pred(iid, category, box, confidence=1.0, num_categories=3, feature=(1.0, 0.0), image="img0", loc_unc=0.0):
    return InstancePrediction(
        image, iid, RotatedBox(*box), probs_for(category, confidence, num_categories), np.asarray(feature, float), loc_unc,
    )


FIXTURES = Path(__file__).resolve().parent / "fixtures"


def load_near_duplicate():
    """Candidates, store, ability, budget and golden of the near-duplicate fixture."""
    d = FIXTURES / "near_duplicate"
    meta = json.loads((d / "store.json").read_text())
    store = PrototypeStore(meta["num_categories"])
    for c, n in meta["counts"].items():
        store.counts[int(c)] = n
    for c, p in meta["prototypes"].items():
        store.prototypes[int(c)] = np.asarray(p, float)
    golden = json.loads((d / "golden.json").read_text())
    return load_predictions(d / "candidates.jsonl"), store, AbilityVector(*meta["ability"]), meta["budget"], golden


# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
