"""Semisynthetic decision environments and their data-file loader.

Three environment families ship with the package as JSON distribution
tables (see ``data/``): a credit-score lending market, a bail/recidivism
setting, and a school-admission program (with a continuous-score variant).
Each file is self-describing: group prior, initial feature support and
probabilities per group, a qualification model (probability table or
logistic weights), and the acceptance cost.

Feature points are plain tuples; the transition rules below are
deterministic functions of (point, group, action, label).
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .mdp import DomainError, EnvSpec, LoadError

BUILTIN = ("lending", "recidivism", "school", "school_continuous")

LENDING_SCORES = 10
RECID_AGE_CLASSES = 5
RECID_PRIORS_CLASSES = 8


def lending_transition(score: int, a: int, y: int) -> int:
    """Score +1 on repayment, -1 on default, unchanged on rejection;
    clamped to the 1..10 range."""
    if not 1 <= score <= LENDING_SCORES:
        raise DomainError(f"lending score {score} outside 1..{LENDING_SCORES}")
    if a == 0:
        return score
    if y == 1:
        return min(score + 1, LENDING_SCORES)
    return max(score - 1, 1)


def recidivism_transition(age: int, priors: int, a: int, y: int) -> tuple[int, int]:
    """Bail plus reoffense (y=0) advances the priors bucket, clamped at 8."""
    if not (1 <= age <= RECID_AGE_CLASSES and 1 <= priors <= RECID_PRIORS_CLASSES):
        raise DomainError(f"recidivism features ({age}, {priors}) out of range")
    if a == 1 and y == 0:
        return (age, min(priors + 1, RECID_PRIORS_CLASSES))
    return (age, priors)


def school_transition(point: tuple, age_index: int, cards: tuple[int, ...], a: int, y: int) -> tuple:
    """Age category advances every step (saturating); the participation
    indicator latches to 1 after an acceptance or a positive label."""
    cats, ind = point[0], point[1]
    new_age = min(cats[age_index] + 1, cards[age_index] - 1)
    cats2 = cats[:age_index] + (new_age,) + cats[age_index + 1 :]
    ind2 = 1 if (a == 1 or y == 1) else ind
    if len(point) == 3:
        return (cats2, ind2, point[2])
    return (cats2, ind2)


def _lending_encode(point: tuple) -> np.ndarray:
    x = np.zeros(LENDING_SCORES)
    x[point[0] - 1] = 1.0
    return x


def _lending_check(point: tuple, z: int) -> None:
    if len(point) != 1 or not 1 <= point[0] <= LENDING_SCORES:
        raise DomainError(f"bad lending point {point}")


def _recid_encode(point: tuple) -> np.ndarray:
    x = np.zeros(RECID_AGE_CLASSES + RECID_PRIORS_CLASSES)
    x[point[0] - 1] = 1.0
    x[RECID_AGE_CLASSES + point[1] - 1] = 1.0
    return x


def _recid_check(point: tuple, z: int) -> None:
    if (
        len(point) != 2
        or not 1 <= point[0] <= RECID_AGE_CLASSES
        or not 1 <= point[1] <= RECID_PRIORS_CLASSES
    ):
        raise DomainError(f"bad recidivism point {point}")


class _SchoolCodec:
    """Encoder/validator for school points: (categories, indicator[, scores])."""

    def __init__(self, cards: tuple[int, ...], continuous: bool):
        self.cards = cards
        self.continuous = continuous
        self.offsets = np.concatenate([[0], np.cumsum(cards)[:-1]]).astype(int)
        self.onehot_dim = int(np.sum(cards))

    @property
    def feature_dim(self) -> int:
        return self.onehot_dim + 1 + (3 if self.continuous else 0)

    def encode(self, point: tuple) -> np.ndarray:
        cats, ind = point[0], point[1]
        x = np.zeros(self.feature_dim)
        x[self.offsets + np.asarray(cats, dtype=int)] = 1.0
        x[self.onehot_dim] = ind
        if self.continuous:
            x[self.onehot_dim + 1 :] = np.asarray(point[2], dtype=np.float64) / 1000.0
        return x

    def check(self, point: tuple, z: int) -> None:
        want = 3 if self.continuous else 2
        if len(point) != want:
            raise DomainError(f"school point has {len(point)} parts, expected {want}")
        cats, ind = point[0], point[1]
        if len(cats) != len(self.cards):
            raise DomainError(f"school point has {len(cats)} categories, expected {len(self.cards)}")
        for i, (cat, card) in enumerate(zip(cats, self.cards)):
            if not 0 <= cat < card:
                raise DomainError(f"school category {i} value {cat} outside 0..{card - 1}")
        if ind not in (0, 1):
            raise DomainError(f"school indicator {ind} not binary")
        if self.continuous:
            for s in point[2]:
                if not 0.0 <= s <= 1000.0:
                    raise DomainError(f"school score {s} outside [0, 1000]")


def _parse_point(kind: str, raw, continuous: bool) -> tuple:
    if kind == "lending":
        return (int(raw),)
    if kind == "recidivism":
        return (int(raw[0]), int(raw[1]))
    cats = tuple(int(c) for c in raw[0])
    ind = int(raw[1])
    if continuous:
        return (cats, ind, tuple(float(s) for s in raw[2]))
    return (cats, ind)


def _point_to_json(kind: str, point: tuple):
    if kind == "lending":
        return point[0]
    if kind == "recidivism":
        return list(point)
    out = [list(point[0]), point[1]]
    if len(point) == 3:
        out.append(list(point[2]))
    return out


def load_raw(path_or_name: str) -> dict:
    """Read a table file (builtin name or filesystem path) without validation."""
    if path_or_name in BUILTIN:
        text = resources.files("fairloop.data").joinpath(f"{path_or_name}.json").read_text()
    else:
        try:
            with open(path_or_name) as fh:
                text = fh.read()
        except OSError as exc:
            raise LoadError(f"cannot read environment table {path_or_name}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path_or_name}: not valid JSON ({exc})") from None


def build_env(raw: dict, *, pool_size: int = 5000) -> EnvSpec:
    """Validate a raw table dict and assemble the environment description."""
    try:
        kind = raw["kind"]
        name = raw.get("name", kind)
        group_count = int(raw["group_count"])
        prior = np.asarray(raw["group_prior"], dtype=np.float64)
        cost = float(raw["cost"])
        support_raw = raw["support"]
        probs_raw = raw["init_probs"]
        alpha_raw = raw["alpha"]
    except KeyError as exc:
        raise LoadError(f"environment table missing field {exc}") from None

    continuous = bool(raw.get("continuous", False))
    if kind not in ("lending", "recidivism", "school"):
        raise LoadError(f"unknown environment kind {kind!r}")
    if len(support_raw) != group_count or len(probs_raw) != group_count:
        raise LoadError("support/init_probs must have one row per group")
    if abs(prior.sum() - 1.0) > 1e-9:
        raise LoadError(f"group_prior sums to {prior.sum()!r}, not 1")

    support = [[_parse_point(kind, p, continuous) for p in row] for row in support_raw]
    init_probs = []
    for z, row in enumerate(probs_raw):
        arr = np.asarray(row, dtype=np.float64)
        if arr.size != len(support[z]):
            raise LoadError(f"init_probs row {z} has {arr.size} entries for {len(support[z])} points")
        s = float(arr.sum())
        if abs(s - 1.0) > 1e-9:
            raise LoadError(f"init_probs row {z} sums to {s!r}, not 1")
        if (arr < 0).any():
            raise LoadError(f"init_probs row {z} has negative entries")
        init_probs.append(arr)

    alpha_table = None
    alpha_logistic = None
    if alpha_raw["kind"] == "table":
        values = alpha_raw["values"]
        if len(values) != group_count:
            raise LoadError("alpha table must have one row per group")
        alpha_table = {}
        for z, row in enumerate(values):
            if len(row) != len(support[z]):
                raise LoadError(f"alpha row {z} has {len(row)} entries for {len(support[z])} points")
            for p, v in zip(support[z], row):
                v = float(v)
                if not 0.0 <= v <= 1.0:
                    raise LoadError(f"alpha row {z} has value {v} outside [0,1]")
                alpha_table[(z, p)] = v
    elif alpha_raw["kind"] == "logistic":
        weights = np.asarray(alpha_raw["weights"], dtype=np.float64)
        alpha_logistic = (weights, float(alpha_raw["bias"]))
    else:
        raise LoadError(f"unknown alpha kind {alpha_raw['kind']!r}")

    if kind == "lending":
        feature_dim = LENDING_SCORES
        transition = lambda point, z, a, y: (lending_transition(point[0], a, y),)
        encode = _lending_encode
        check = _lending_check
        # tabular alpha must cover every reachable score
        for z in range(group_count):
            for s in range(1, LENDING_SCORES + 1):
                if ((z, (s,)) not in alpha_table) if alpha_table else False:
                    raise LoadError(f"lending alpha missing score {s} for group {z}")
    elif kind == "recidivism":
        feature_dim = RECID_AGE_CLASSES + RECID_PRIORS_CLASSES
        transition = lambda point, z, a, y: recidivism_transition(point[0], point[1], a, y)
        encode = _recid_encode
        check = _recid_check
        if alpha_table is not None:
            for z in range(group_count):
                for age in range(1, RECID_AGE_CLASSES + 1):
                    for pr in range(1, RECID_PRIORS_CLASSES + 1):
                        if (z, (age, pr)) not in alpha_table:
                            raise LoadError(f"recidivism alpha missing ({age},{pr}) for group {z}")
    else:
        cards = tuple(int(c) for c in raw["cardinalities"])
        age_index = int(raw["age_index"])
        codec = _SchoolCodec(cards, continuous)
        feature_dim = codec.feature_dim
        if alpha_logistic is None:
            raise LoadError("school environments need logistic alpha")
        if alpha_logistic[0].size != feature_dim + 1:
            raise LoadError(
                f"school logistic weights have {alpha_logistic[0].size} entries, "
                f"expected {feature_dim + 1} (features plus group indicator)"
            )
        transition = lambda point, z, a, y: school_transition(point, age_index, cards, a, y)
        encode = codec.encode
        check = codec.check

    env = EnvSpec(
        name=name,
        group_count=group_count,
        group_prior=prior,
        support=support,
        init_probs=init_probs,
        cost_c=cost,
        feature_dim=feature_dim,
        transition_fn=transition,
        encode_fn=encode,
        check_fn=check,
        alpha_table=alpha_table,
        alpha_logistic=alpha_logistic,
        pool_size=int(raw.get("pool_size", pool_size)),
    )
    for z in range(group_count):
        for p in support[z]:
            check(p, z)
            a = env.alpha_of(p, z)
            if not 0.0 <= a <= 1.0:
                raise LoadError(f"alpha({p}, {z}) = {a} outside [0,1]")
    return env


def load_env(path_or_name: str, *, pool_size: int = 5000) -> EnvSpec:
    """Load and validate an environment by builtin name or file path."""
    return build_env(load_raw(path_or_name), pool_size=pool_size)


def export_env(path_or_name: str) -> dict:
    """Load, validate and return the canonical table dict (for diffing)."""
    raw = load_raw(path_or_name)
    env = build_env(raw)
    kind = raw["kind"]
    out = {
        "schema_version": raw.get("schema_version", 1),
        "name": env.name,
        "kind": kind,
        "continuous": bool(raw.get("continuous", False)),
        "group_count": env.group_count,
        "group_prior": [float(v) for v in env.group_prior],
        "cost": env.cost_c,
        "support": [[_point_to_json(kind, p) for p in row] for row in env.support],
        "init_probs": [[float(v) for v in row] for row in env.init_probs],
    }
    if env.alpha_table is not None:
        out["alpha"] = {
            "kind": "table",
            "values": [
                [env.alpha_table[(z, p)] for p in env.support[z]] for z in range(env.group_count)
            ],
        }
    else:
        w, b = env.alpha_logistic
        out["alpha"] = {"kind": "logistic", "weights": [float(v) for v in w], "bias": b}
    if kind == "school":
        out["cardinalities"] = [int(c) for c in raw["cardinalities"]]
        out["age_index"] = int(raw["age_index"])
    for key in ("provenance", "calibration"):
        if key in raw:
            out[key] = raw[key]
    return out
