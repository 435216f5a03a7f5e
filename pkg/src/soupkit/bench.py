"""Evaluation and sweep machinery.

`evaluate` scores a checkpoint on a meta set: mean next-token loss over the
full eval sequences, its exponential, and greedy-decoding exact match. Greedy
decoding is deterministic argmax with at most 32 new tokens per prompt; a
completion counts as a match when its tokens equal the reference tokens up to
the first terminator (`#` or EOS).

`run_grid` runs one soup training per grid point. Points are independent, get
their own seeds derived by hashing the global seed with the point's settings,
and can execute in parallel worker processes; output order never depends on
completion order. A point whose training aborts is recorded as failed and the
sweep continues.

Timing is kept in memory only; serialized records carry a zero in the wall
column so sweep outputs stay byte-reproducible.
"""

from __future__ import annotations

import hashlib
import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import data as D
from . import model as M
from . import soup as S
from .ioutil import atomic_write_text, fmt17

MAX_NEW_TOKENS = 32
VANILLA_GRID = tuple(i / 10 for i in range(1, 10))
ACTIVATION_PREFERENCE = ("sigmoid", "clamp", "softmax", "linear")


@dataclass(frozen=True)
class Metrics:
    nll: float
    ppl: float
    exact_match: float


@dataclass
class SweepRecord:
    """One evaluated soup: its settings plus per-eval-set metrics."""

    train_spec: str
    epochs: int | None
    learning_rate: float | None
    activation: str | None
    lambda_l1: float | None
    seed: int | None
    metrics: dict[str, Metrics] = field(default_factory=dict)
    wall_time_seconds: float = 0.0
    failed: bool = False


def _terminate(tokens: Sequence[int]) -> tuple[int, ...]:
    """Tokens up to the first terminator; the terminator itself is dropped."""
    out = []
    for tok in tokens:
        if tok in D.TERMINATOR_IDS:
            break
        out.append(int(tok))
    return tuple(out)


def greedy_complete(ckpt: M.Checkpoint, prompts: Sequence[Sequence[int]], max_new_tokens: int = MAX_NEW_TOKENS) -> list[tuple[int, ...]]:
    """Greedy continuations for same-length prompts, decoded in one batch."""
    if not prompts:
        return []
    width = len(prompts[0])
    if any(len(p) != width for p in prompts):
        raise ValueError("greedy_complete needs prompts of equal length")
    seqs = np.asarray(prompts, dtype=np.int64)
    generated = []
    for _ in range(max_new_tokens):
        if seqs.shape[1] >= ckpt.config.max_seq_len:
            break
        logits = M.forward(ckpt, seqs)
        nxt = np.argmax(logits[:, -1, :], axis=-1)
        generated.append(nxt)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done = np.zeros(len(prompts), dtype=bool)
        if generated:
            gen = np.stack(generated, axis=1)
            for term in D.TERMINATOR_IDS:
                done |= (gen == term).any(axis=1)
        if done.all():
            break
    if not generated:
        return [() for _ in prompts]
    gen = np.stack(generated, axis=1)
    return [tuple(int(x) for x in row) for row in gen]


def evaluate(ckpt: M.Checkpoint, meta: D.MetaSet) -> Metrics:
    """Loss, perplexity, and greedy exact match on the eval split."""
    if not meta.eval:
        raise ValueError(f"meta set {meta.name!r} has an empty eval split")
    rows = D.rows_from_samples(meta.eval)
    inputs, targets = D.pad_rows(rows, D.PAD_ID)
    nll = M.nll_loss(M.forward(ckpt, inputs), targets, D.PAD_ID)
    ppl = float(np.exp(nll))

    by_len: dict[int, list[int]] = {}
    for i, sample in enumerate(meta.eval):
        by_len.setdefault(len(sample.prompt), []).append(i)
    hits = 0
    for _, indices in sorted(by_len.items()):
        prompts = [meta.eval[i].prompt for i in indices]
        completions = greedy_complete(ckpt, prompts)
        for i, completion in zip(indices, completions):
            sample = meta.eval[i]
            reference = _terminate(sample.full[len(sample.prompt) :])
            if _terminate(completion) == reference:
                hits += 1
    return Metrics(nll=nll, ppl=ppl, exact_match=hits / len(meta.eval))


# ---------------------------------------------------------------------------
# vanilla sweep


def run_vanilla_sweep(
    c1: M.Checkpoint, c2: M.Checkpoint, eval_sets: Sequence[D.MetaSet]
) -> list[SweepRecord]:
    """Eleven records ordered by ratio: the c2 base, nine grid soups, the c1 base."""
    records = []
    for alpha in [0.0, *VANILLA_GRID, 1.0]:
        started = time.perf_counter()
        souped = S.vanilla_soup(c1, c2, alpha)
        metrics = {ms.name: evaluate(souped, ms) for ms in eval_sets}
        records.append(
            SweepRecord(
                train_spec=f"vanilla@{alpha:.2f}",
                epochs=None,
                learning_rate=None,
                activation=None,
                lambda_l1=None,
                seed=None,
                metrics=metrics,
                wall_time_seconds=time.perf_counter() - started,
            )
        )
    return records


# ---------------------------------------------------------------------------
# hyperparameter grid


@dataclass(frozen=True)
class GridSpec:
    train_specs: tuple[tuple[tuple[str, int], ...], ...]
    epochs: tuple[int, ...]
    learning_rates: tuple[float, ...]
    activations: tuple[str, ...] = ("softmax",)
    lambdas: tuple[float, ...] = (0.0,)
    batch_size: int = 8

    def __post_init__(self):
        if not (self.train_specs and self.epochs and self.learning_rates and self.activations and self.lambdas):
            raise ValueError("every grid axis needs at least one value")

    def points(self):
        return itertools.product(
            self.train_specs, self.epochs, self.learning_rates, self.activations, self.lambdas
        )


def point_seed(global_seed: int, components: tuple[tuple[str, int], ...], epochs: int, lr: float, activation: str, lam: float) -> int:
    """Stable per-point seed: a hash of the global seed with the point's own settings.

    Keying on the settings rather than a running counter keeps a point's seed
    fixed when new axis values are added around it.
    """
    spec_text = "+".join(f"{name}:{count}" for name, count in components)
    key = f"{global_seed}|{spec_text}|{epochs}|{lr!r}|{activation}|{lam!r}"
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _grid_point_record(args) -> SweepRecord:
    c1, c2, sets, eval_names, batch_size, global_seed, point = args
    components, epochs, lr, activation, lam = point
    seed = point_seed(global_seed, components, epochs, lr, activation, lam)
    spec = D.MixSpec(components=components, seed=seed)
    record = SweepRecord(
        train_spec=spec.text(),
        epochs=epochs,
        learning_rate=lr,
        activation=activation,
        lambda_l1=lam,
        seed=seed,
    )
    dev = D.mix(sets, spec)
    cfg = S.SoupTrainConfig(
        learning_rate=lr,
        epochs=epochs,
        activation=activation,
        lambda_l1=lam,
        batch_size=batch_size,
        seed=seed,
    )
    started = time.perf_counter()
    try:
        alpha_set, _ = S.train_alpha(c1, c2, dev, cfg, D.PAD_ID)
        try:
            souped = S.apply_alpha(c1, c2, alpha_set)
        except ValueError:
            # Trained raws can leave the representable simplex (linear
            # activation at extreme rates) without tripping an in-loop check
            # when training ends on the very step that broke them.
            record.failed = True
        else:
            record.metrics = {name: evaluate(souped, sets[name]) for name in eval_names}
    except M.NonFiniteLossError:
        record.failed = True
    record.wall_time_seconds = time.perf_counter() - started
    return record


def run_grid(
    c1: M.Checkpoint,
    c2: M.Checkpoint,
    grid: GridSpec,
    sets: Mapping[str, D.MetaSet],
    eval_sets: Sequence[str],
    global_seed: int,
    jobs: int = 1,
) -> list[SweepRecord]:
    """One learnable soup per grid point, evaluated on every eval set."""
    for name in eval_sets:
        if name not in sets:
            raise ValueError(f"unknown eval set {name!r}")
    work = [
        (c1, c2, dict(sets), tuple(eval_sets), grid.batch_size, global_seed, point)
        for point in grid.points()
    ]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_grid_point_record, work))
    return [_grid_point_record(item) for item in work]


def ratio_components(
    name_a: str, name_b: str, total: int = 100
) -> tuple[tuple[tuple[str, int], ...], ...]:
    """The ratio axis: 5:95 through 95:5 in steps of ten percentage points."""
    if total < 20:
        raise ValueError("ratio sweeps need a total of at least 20 samples")
    out = []
    for pct in range(5, 100, 10):
        count_a = round(total * pct / 100)
        out.append(((name_a, count_a), (name_b, total - count_a)))
    return tuple(out)


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryRow:
    train_spec: str
    means: dict[str, float]
    maxes: dict[str, float]
    sum_mean: float
    sum_max: float


@dataclass(frozen=True)
class SummaryTable:
    eval_sets: tuple[str, ...]
    rows: tuple[SummaryRow, ...]


def summarize(records: Sequence[SweepRecord]) -> SummaryTable:
    """Mean and max exact match per train spec and eval set, with row sums."""
    usable = [r for r in records if not r.failed and r.metrics]
    if not usable:
        raise ValueError("no usable records to summarize")
    eval_sets: list[str] = []
    for record in usable:
        for name in record.metrics:
            if name not in eval_sets:
                eval_sets.append(name)
    specs: list[str] = []
    for record in usable:
        if record.train_spec not in specs:
            specs.append(record.train_spec)
    rows = []
    for spec in specs:
        group = [r for r in usable if r.train_spec == spec]
        means = {}
        maxes = {}
        for name in eval_sets:
            values = [r.metrics[name].exact_match for r in group if name in r.metrics]
            if not values:
                continue
            means[name] = float(np.mean(values))
            maxes[name] = float(np.max(values))
        rows.append(
            SummaryRow(
                train_spec=spec,
                means=means,
                maxes=maxes,
                sum_mean=float(sum(means.values())),
                sum_max=float(sum(maxes.values())),
            )
        )
    return SummaryTable(eval_sets=tuple(eval_sets), rows=tuple(rows))


def record_score(record: SweepRecord) -> float:
    """Selection criterion: exact match summed over the record's eval sets."""
    return float(sum(m.exact_match for m in record.metrics.values()))


def select_best(
    records: Sequence[SweepRecord], batch_size: int = 8
) -> tuple[S.SoupTrainConfig, D.MixSpec]:
    """The winning grid point by summed exact match.

    Ties go to the lower learning rate, then fewer epochs, then the activation
    preference order, then earliest position in the record list.
    """
    candidates = [
        (i, r)
        for i, r in enumerate(records)
        if not r.failed and r.metrics and r.epochs is not None
    ]
    if not candidates:
        raise ValueError("no successful grid records to select from")

    def sort_key(item):
        i, r = item
        return (
            -record_score(r),
            r.learning_rate,
            r.epochs,
            ACTIVATION_PREFERENCE.index(r.activation),
            i,
        )

    _, best = min(candidates, key=sort_key)
    cfg = S.SoupTrainConfig(
        learning_rate=best.learning_rate,
        epochs=best.epochs,
        activation=best.activation,
        lambda_l1=best.lambda_l1,
        batch_size=batch_size,
        seed=best.seed,
    )
    return cfg, D.MixSpec(components=D.parse_mix_text(best.train_spec), seed=best.seed)


# ---------------------------------------------------------------------------
# CSV

RECORDS_CSV_HEADER = "train_spec,epochs,lr,activation,lambda,seed,eval_set,nll,ppl,exact_match,wall_s"


def _opt(value, fmt=str) -> str:
    return "" if value is None else fmt(value)


def records_to_csv(records: Sequence[SweepRecord], eval_order: Sequence[str] | None = None) -> str:
    lines = [RECORDS_CSV_HEADER]
    for record in records:
        shared = (
            f"{record.train_spec},{_opt(record.epochs)},{_opt(record.learning_rate, fmt17)},"
            f"{_opt(record.activation)},{_opt(record.lambda_l1, fmt17)},{_opt(record.seed)}"
        )
        names = list(record.metrics)
        if eval_order:
            names = [n for n in eval_order if n in record.metrics]
        if record.failed or not names:
            lines.append(f"{shared},,,,,0")
            continue
        for name in names:
            met = record.metrics[name]
            lines.append(
                f"{shared},{name},{fmt17(met.nll)},{fmt17(met.ppl)},{fmt17(met.exact_match)},0"
            )
    return "\n".join(lines) + "\n"


def save_records_csv(records: Sequence[SweepRecord], path: str, eval_order: Sequence[str] | None = None) -> None:
    atomic_write_text(path, records_to_csv(records, eval_order))


def load_records_csv(path: str) -> list[SweepRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != RECORDS_CSV_HEADER:
        raise ValueError(f"{path}: missing sweep CSV header")
    records: list[SweepRecord] = []
    keyed: dict[tuple, SweepRecord] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 11:
            raise ValueError(f"{path}:{lineno}: expected 11 fields, got {len(fields)}")
        spec, epochs_s, lr_s, act_s, lam_s, seed_s, eval_set, nll_s, ppl_s, em_s, _wall = fields
        key = (spec, epochs_s, lr_s, act_s, lam_s, seed_s)
        if key not in keyed:
            record = SweepRecord(
                train_spec=spec,
                epochs=int(epochs_s) if epochs_s else None,
                learning_rate=float(lr_s) if lr_s else None,
                activation=act_s or None,
                lambda_l1=float(lam_s) if lam_s else None,
                seed=int(seed_s) if seed_s else None,
            )
            keyed[key] = record
            records.append(record)
        record = keyed[key]
        if eval_set == "" and nll_s == "":
            record.failed = True
            continue
        record.metrics[eval_set] = Metrics(
            nll=float(nll_s), ppl=float(ppl_s), exact_match=float(em_s)
        )
    return records


SUMMARY_CSV_PREFIX = "train_spec"


def summary_to_csv(table: SummaryTable) -> str:
    cols = [SUMMARY_CSV_PREFIX]
    for name in table.eval_sets:
        cols.append(f"mean:{name}")
        cols.append(f"max:{name}")
    cols.extend(["sum_mean", "sum_max"])
    lines = [",".join(cols)]
    for row in table.rows:
        fields = [row.train_spec]
        for name in table.eval_sets:
            fields.append(fmt17(row.means[name]) if name in row.means else "")
            fields.append(fmt17(row.maxes[name]) if name in row.maxes else "")
        fields.append(fmt17(row.sum_mean))
        fields.append(fmt17(row.sum_max))
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def save_summary_csv(table: SummaryTable, path: str) -> None:
    atomic_write_text(path, summary_to_csv(table))
