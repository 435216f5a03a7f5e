"""Weight-space merging of two sibling checkpoints.

A soup assigns each unit (see `model.enumerate_units`) a convex pair
(alpha1, alpha2) and forms alpha1 * theta1 + alpha2 * theta2 tensor by tensor.
The pair comes from raw parameters through one of four activations:

  sigmoid   one raw, alpha1 = logistic(raw),         init raw 0
  linear    one raw, alpha1 = raw (unbounded),       init raw 0.5
  clamp     one raw, alpha1 = raw clipped to [0,1],  init raw 0.5
  softmax   two raws, normalized pair,               init raws (0.5, 0.5)

All four start at the even split. `train_alpha` optimizes only the raws on a
small development set, with the two base checkpoints frozen; an optional L1
penalty on the raws pulls the soup back toward the even split.

The simplex invariant is strict: activate() returns a pair whose float64 sum
is exactly 1.0. For the bounded kinds this falls out of the arithmetic; for
linear, a raw far outside [0, 1] can land on a pair whose rounded sum misses
1.0 by one ulp, in which case alpha1 is refitted to 1 - alpha2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import model as m
from .autodiff import stable_sigmoid
from .ioutil import atomic_write_text, fmt17

ACTIVATION_KINDS = ("sigmoid", "linear", "clamp", "softmax")


def default_raw(kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return np.array([0.0])
    if kind == "linear":
        return np.array([0.5])
    if kind == "clamp":
        return np.array([0.5])
    if kind == "softmax":
        return np.array([0.5, 0.5])
    raise ValueError(f"unknown activation kind {kind!r}")


def raw_size(kind: str) -> int:
    return 2 if kind == "softmax" else 1


def activate(raw: np.ndarray, kind: str) -> tuple[float, float]:
    """Raw parameters to a pair summing to exactly 1.0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (raw_size(kind),):
        raise ValueError(f"{kind} activation expects raw shape ({raw_size(kind)},), got {raw.shape}")
    if kind == "sigmoid":
        a1 = float(stable_sigmoid(raw[:1])[0])
    elif kind == "linear":
        a1 = float(raw[0])
    elif kind == "clamp":
        a1 = float(min(max(raw[0], 0.0), 1.0))
    elif kind == "softmax":
        # two-way softmax written as a logistic of the raw difference: shift
        # invariant by construction and immune to exp overflow
        a1 = float(stable_sigmoid(np.array([raw[0] - raw[1]]))[0])
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    a2 = 1.0 - a1
    if a1 + a2 != 1.0:
        a1 = 1.0 - a2
    return a1, a2


@dataclass
class AlphaSet:
    """Per-unit raw parameters plus the activation that maps them to mixing pairs."""

    activation: str
    raw: dict[m.SoupUnitId, np.ndarray]

    def __post_init__(self):
        if self.activation not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.activation!r}")
        size = raw_size(self.activation)
        for unit, arr in self.raw.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (size,):
                raise ValueError(f"unit {unit} raw must have shape ({size},), got {arr.shape}")
            self.raw[unit] = arr

    @classmethod
    def default(cls, config: m.ModelConfig, activation: str) -> "AlphaSet":
        return cls(
            activation=activation,
            raw={unit: default_raw(activation) for unit in m.enumerate_units(config)},
        )

    def pairs(self) -> dict[m.SoupUnitId, tuple[float, float]]:
        return {unit: activate(arr, self.activation) for unit, arr in self.raw.items()}

    def copy(self) -> "AlphaSet":
        return AlphaSet(self.activation, {u: a.copy() for u, a in self.raw.items()})


def _check_siblings(c1: m.Checkpoint, c2: m.Checkpoint) -> None:
    if c1.config != c2.config:
        raise ValueError(
            f"checkpoints have different configs: {c1.config} vs {c2.config}"
        )


def merge(
    c1: m.Checkpoint,
    c2: m.Checkpoint,
    alphas: Mapping[m.SoupUnitId, tuple[float, float]],
) -> m.Checkpoint:
    """Per-unit interpolation of two same-config checkpoints."""
    _check_siblings(c1, c2)
    units = m.enumerate_units(c1.config)
    if set(alphas.keys()) != set(units):
        missing = set(units) - set(alphas.keys())
        extra = set(alphas.keys()) - set(units)
        detail = f"missing {sorted(missing, key=str)[0]}" if missing else f"extra {sorted(extra, key=str)[0]}"
        raise ValueError(f"alpha assignment does not cover the unit set exactly: {detail}")
    tensors: dict[str, np.ndarray] = {}
    for unit in units:
        a1, a2 = alphas[unit]
        if not (np.isfinite(a1) and np.isfinite(a2)):
            raise ValueError(f"non-finite mixing weights for unit {unit}")
        if abs((a1 + a2) - 1.0) > 1e-12:
            raise ValueError(f"mixing weights for unit {unit} sum to {a1 + a2!r}, not 1")
        name = unit.tensor_name()
        tensors[name] = a1 * c1.tensors[name] + a2 * c2.tensors[name]
    return m.Checkpoint(
        config=c1.config,
        tensors=tensors,
        lineage=["soup"] + list(c1.lineage) + list(c2.lineage),
        seed=c1.seed,
    )


def vanilla_soup(c1: m.Checkpoint, c2: m.Checkpoint, alpha1: float) -> m.Checkpoint:
    """One global ratio for every unit."""
    if not (0.0 <= alpha1 <= 1.0):
        raise ValueError(f"vanilla ratio must lie in [0, 1], got {alpha1!r}")
    a1 = float(alpha1)
    a2 = 1.0 - a1
    if a1 + a2 != 1.0:
        a1 = 1.0 - a2
    pairs = {unit: (a1, a2) for unit in m.enumerate_units(c1.config)}
    return merge(c1, c2, pairs)


def apply_alpha(c1: m.Checkpoint, c2: m.Checkpoint, alpha_set: AlphaSet) -> m.Checkpoint:
    return merge(c1, c2, alpha_set.pairs())


def alpha_grad(
    weight_grads: Mapping[str, np.ndarray],
    c1: m.Checkpoint,
    c2: m.Checkpoint,
    alpha_set: AlphaSet,
) -> dict[m.SoupUnitId, np.ndarray]:
    """Chain the per-tensor loss gradients back to the raw mixing parameters.

    For each unit the loss moves along theta1 - theta2 as alpha1 grows, so the
    shared ingredient is the inner product of the weight gradient with that
    difference; the activation then contributes its own derivative.
    """
    _check_siblings(c1, c2)
    kind = alpha_set.activation
    grads: dict[m.SoupUnitId, np.ndarray] = {}
    for unit, raw in alpha_set.raw.items():
        name = unit.tensor_name()
        g = weight_grads[name]
        d = float(np.sum(g * (c1.tensors[name] - c2.tensors[name])))
        if kind == "sigmoid":
            a1 = activate(raw, kind)[0]
            grads[unit] = np.array([d * a1 * (1.0 - a1)])
        elif kind == "linear":
            grads[unit] = np.array([d])
        elif kind == "clamp":
            inside = 0.0 <= raw[0] <= 1.0
            grads[unit] = np.array([d if inside else 0.0])
        else:  # softmax: antisymmetric pair through the 2x2 jacobian
            a1, a2 = activate(raw, kind)
            grads[unit] = np.array([d * a1 * a2, -d * a1 * a2])
    return grads


@dataclass(frozen=True)
class SoupTrainConfig:
    learning_rate: float
    epochs: int
    activation: str = "softmax"
    lambda_l1: float = 0.0
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.activation not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.activation!r}")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be non-negative")


@dataclass(frozen=True)
class AlphaStepRecord:
    step: int
    data_loss: float
    l1_penalty: float
    mean_alpha1: float


def _l1_subgradient(raw: np.ndarray) -> np.ndarray:
    # sign with the flat point kept at zero
    return np.sign(raw)


def train_alpha(
    c1: m.Checkpoint,
    c2: m.Checkpoint,
    dev: list[tuple[np.ndarray, np.ndarray]],
    cfg: SoupTrainConfig,
    pad_id: int,
) -> tuple[AlphaSet, list[AlphaStepRecord]]:
    """Fit the raw mixing parameters on a development set, bases frozen.

    Each step merges with the current pairs, takes loss gradients through the
    merged weights, projects them onto the raws, adds the L1 subgradient
    scaled by lambda, and applies one Adam update. Aborts with the step index
    if the data loss ever stops being finite.
    """
    _check_siblings(c1, c2)
    if not dev:
        raise ValueError("empty dev set: alpha training needs at least one sample")
    from .data import pad_rows

    alpha_set = AlphaSet.default(c1.config, cfg.activation)
    rng = np.random.default_rng(cfg.seed)
    opt = m.Adam(cfg.learning_rate)
    history: list[AlphaStepRecord] = []
    step = 0
    for _ in range(cfg.epochs):
        for batch_idx in m.epoch_batches(len(dev), cfg.batch_size, rng):
            rows = [dev[i] for i in batch_idx]
            inputs, targets = pad_rows(rows, pad_id)
            try:
                merged = merge(c1, c2, alpha_set.pairs())
            except ValueError as exc:
                # configs were validated up front, so a merge failure here means
                # the raws have left the range where the simplex is representable
                raise m.NonFiniteLossError(step, "mixing weights diverged") from exc
            data_loss, weight_grads = m.loss_and_weight_grads(merged, inputs, targets, pad_id)
            if not np.isfinite(data_loss):
                raise m.NonFiniteLossError(step)
            raw_grads = alpha_grad(weight_grads, c1, c2, alpha_set)
            if cfg.lambda_l1 > 0.0:
                for unit in raw_grads:
                    raw_grads[unit] = raw_grads[unit] + cfg.lambda_l1 * _l1_subgradient(
                        alpha_set.raw[unit]
                    )
            penalty = cfg.lambda_l1 * float(
                sum(np.abs(arr).sum() for arr in alpha_set.raw.values())
            )
            mean_alpha1 = float(np.mean([pair[0] for pair in alpha_set.pairs().values()]))
            history.append(AlphaStepRecord(step, data_loss, penalty, mean_alpha1))
            alpha_set = AlphaSet(cfg.activation, opt.step(alpha_set.raw, raw_grads))
            step += 1
    return alpha_set, history


# ---------------------------------------------------------------------------
# alpha CSV

ALPHA_CSV_HEADER = "unit_kind,layer,activation,raw0,raw1,alpha1,alpha2"


def _canonical_units(raw: Mapping[m.SoupUnitId, np.ndarray]) -> list[m.SoupUnitId]:
    layered = sorted(
        (u for u in raw if u.layer is not None),
        key=lambda u: (u.layer, m.PER_LAYER_KINDS.index(u.kind)),
    )
    out = [u for u in raw if u.kind == "embed"]
    out.extend(layered)
    out.extend(u for u in raw if u.kind == "final_norm")
    out.extend(u for u in raw if u.kind == "lm_head")
    return out


def save_alpha_csv(alpha_set: AlphaSet, path: str) -> None:
    """One row per unit in canonical order, raws and activated pair at 17 significant digits."""
    lines = [ALPHA_CSV_HEADER]
    for unit in _canonical_units(alpha_set.raw):
        raw = alpha_set.raw[unit]
        a1, a2 = activate(raw, alpha_set.activation)
        layer = "" if unit.layer is None else str(unit.layer)
        raw1 = fmt17(raw[1]) if len(raw) == 2 else ""
        lines.append(
            f"{unit.kind},{layer},{alpha_set.activation},{fmt17(raw[0])},{raw1},{fmt17(a1)},{fmt17(a2)}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_alpha_csv(path: str) -> AlphaSet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != ALPHA_CSV_HEADER:
        raise ValueError(f"{path}: missing alpha CSV header")
    activation = None
    raw: dict[m.SoupUnitId, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(fields)}")
        kind, layer_s, act, raw0_s, raw1_s, a1_s, a2_s = fields
        if activation is None:
            activation = act
        elif act != activation:
            raise ValueError(f"{path}:{lineno}: mixed activation kinds in one file")
        layer = None if layer_s == "" else int(layer_s)
        unit = m.SoupUnitId(kind, layer)
        if unit in raw:
            raise ValueError(f"{path}:{lineno}: duplicate unit {unit}")
        values = [float(raw0_s)] + ([float(raw1_s)] if raw1_s != "" else [])
        arr = np.array(values, dtype=np.float64)
        a1, a2 = activate(arr, act)
        if float(a1_s) != a1 or float(a2_s) != a2:
            raise ValueError(f"{path}:{lineno}: alpha columns do not match the raw parameters")
        raw[unit] = arr
    if activation is None:
        raise ValueError(f"{path}: no alpha rows")
    return AlphaSet(activation, raw)
