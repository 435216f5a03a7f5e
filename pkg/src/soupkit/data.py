"""Character-level synthetic tasks and dataset plumbing.

The vocabulary is a fixed 64-slot table. Slots 0..41 hold the printable
alphabet (digits, lowercase letters, the punctuation `+=|>#.`), slot 42 is the
space, then the three markers BOS/EOS/PAD; the remaining slots are reserved so
the table size stays 64 regardless of how many symbols are in use.

Two tasks share the alphabet:
  reverse   "abc|" -> "abc|cba"          string reversal around a pipe
  modadd    "7+5=" -> "7+5=2#"           addition mod m, closed by `#`

Generators emit (prompt tokens, full tokens) pairs with BOS at the front and
EOS at the end of the full sequence; the prompt is always a strict prefix of
the full sequence. Train and eval splits never share a sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .ioutil import atomic_write_text

_PRINTABLE = "0123456789abcdefghijklmnopqrstuvwxyz+=|>#. "
CHAR_TO_ID = {ch: i for i, ch in enumerate(_PRINTABLE)}
ID_TO_CHAR = {i: ch for ch, i in CHAR_TO_ID.items()}
BOS_ID = len(_PRINTABLE)
EOS_ID = BOS_ID + 1
PAD_ID = BOS_ID + 2
VOCAB_SIZE = 64

_PIPE_ID = CHAR_TO_ID["|"]
_HASH_ID = CHAR_TO_ID["#"]
TERMINATOR_IDS = (EOS_ID, _HASH_ID)


class Sample(NamedTuple):
    prompt: tuple[int, ...]
    full: tuple[int, ...]


@dataclass
class MetaSet:
    """A named task: disjoint train and eval splits of (prompt, full) samples."""

    name: str
    train: list[Sample]
    eval: list[Sample]


@dataclass(frozen=True)
class MixSpec:
    """How to assemble a training set: (meta set name, sample count) components plus a seed."""

    components: tuple[tuple[str, int], ...]
    seed: int

    def __post_init__(self):
        if not self.components:
            raise ValueError("mix needs at least one component")
        for name, count in self.components:
            if count < 1:
                raise ValueError(f"component {name!r} must draw at least one sample")

    def text(self) -> str:
        return "+".join(f"{name}:{count}" for name, count in self.components)


def parse_mix_text(text: str) -> tuple[tuple[str, int], ...]:
    """Inverse of MixSpec.text: "taskA:50+taskB:50" -> (("taskA", 50), ("taskB", 50))."""
    parts = []
    for chunk in text.split("+"):
        name, sep, count = chunk.rpartition(":")
        if not sep or not name:
            raise ValueError(f"bad mix component {chunk!r}, expected name:count")
        parts.append((name, int(count)))
    return tuple(parts)


def encode(text: str) -> list[int]:
    """Characters to token ids, BOS-prefixed and EOS-terminated."""
    try:
        body = [CHAR_TO_ID[ch] for ch in text]
    except KeyError as exc:
        raise ValueError(f"unsupported character {exc.args[0]!r}") from None
    return [BOS_ID] + body + [EOS_ID]


def decode(tokens: Sequence[int]) -> str:
    """Token ids back to characters; markers are dropped, reserved ids are rejected."""
    chars = []
    for tok in tokens:
        tok = int(tok)
        if tok in (BOS_ID, EOS_ID, PAD_ID):
            continue
        if tok not in ID_TO_CHAR:
            raise ValueError(f"token id {tok} has no printable symbol")
        chars.append(ID_TO_CHAR[tok])
    return "".join(chars)


def _make_sample(prompt_text: str, full_text: str) -> Sample:
    full = encode(full_text)
    prompt = encode(prompt_text)[:-1]  # drop EOS so the prompt is a prefix of full
    assert tuple(full[: len(prompt)]) == tuple(prompt)
    return Sample(tuple(prompt), tuple(full))


def gen_task_reverse(
    seed: int,
    n_train: int,
    n_eval: int,
    len_range: tuple[int, int] = (3, 6),
    max_seq_len: int = 64,
) -> MetaSet:
    """Distinct lowercase strings s, prompt "s|", completion reverse(s)."""
    lo, hi = len_range
    if lo < 2 or hi < lo:
        raise ValueError(f"len_range must satisfy 2 <= lo <= hi, got {len_range}")
    if hi > max_seq_len // 2 - 3:
        raise ValueError(
            f"len_range upper bound {hi} exceeds {max_seq_len // 2 - 3} for max_seq_len {max_seq_len}"
        )
    if n_train < 0 or n_eval < 0 or n_train + n_eval < 1:
        raise ValueError("need a positive number of samples")
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    want = n_train + n_eval
    seen: set[str] = set()
    samples: list[Sample] = []
    attempts = 0
    while len(samples) < want:
        attempts += 1
        if attempts > 200 * want + 1000:
            raise ValueError(
                f"cannot draw {want} distinct strings from len_range {len_range}"
            )
        length = int(rng.integers(lo, hi + 1))
        s = "".join(letters[int(i)] for i in rng.integers(0, 26, size=length))
        if s in seen:
            continue
        seen.add(s)
        samples.append(_make_sample(s + "|", s + "|" + s[::-1]))
    return MetaSet(name="reverse", train=samples[:n_train], eval=samples[n_train:])


def gen_task_modadd(seed: int, n_train: int, n_eval: int, modulus: int) -> MetaSet:
    """Distinct pairs (a, b) below the modulus; prompt "a+b=", completion (a+b) mod m then `#`."""
    if not (2 <= modulus <= 97):
        raise ValueError(f"modulus must lie in [2, 97], got {modulus}")
    if n_train < 0 or n_eval < 0 or n_train + n_eval < 1:
        raise ValueError("need a positive number of samples")
    capacity = modulus * modulus
    if n_train + n_eval > capacity:
        raise ValueError(
            f"requested {n_train + n_eval} samples but only {capacity} distinct pairs exist"
        )
    rng = np.random.default_rng(seed)
    picks = rng.permutation(capacity)[: n_train + n_eval]
    samples = []
    for code in picks:
        a, b = int(code) // modulus, int(code) % modulus
        c = (a + b) % modulus
        samples.append(_make_sample(f"{a}+{b}=", f"{a}+{b}={c}#"))
    return MetaSet(name="modadd", train=samples[:n_train], eval=samples[n_train:])


# ---------------------------------------------------------------------------
# dataset assembly

Dataset = list[tuple[np.ndarray, np.ndarray]]


def rows_from_samples(samples: Sequence[Sample]) -> Dataset:
    """Next-token rows: input is the full sequence minus its last token, target the shift."""
    rows: Dataset = []
    for sample in samples:
        full = np.asarray(sample.full, dtype=np.int64)
        rows.append((full[:-1], full[1:]))
    return rows


def pad_rows(rows: Sequence[tuple[np.ndarray, np.ndarray]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged rows into (batch, time) arrays, padding to the longest row."""
    width = max(len(inp) for inp, _ in rows)
    inputs = np.full((len(rows), width), pad_id, dtype=np.int64)
    targets = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, (inp, tgt) in enumerate(rows):
        inputs[i, : len(inp)] = inp
        targets[i, : len(tgt)] = tgt
    return inputs, targets


def mix(sets: Mapping[str, MetaSet] | Sequence[MetaSet], spec: MixSpec) -> Dataset:
    """Draw from train splits without replacement per component, then shuffle together.

    Every row is padded to the longest sequence in the mixed set, so any
    consecutive slice of the result is a rectangular batch.
    """
    if not isinstance(sets, Mapping):
        sets = {ms.name: ms for ms in sets}
    rng = np.random.default_rng(spec.seed)
    chosen: list[Sample] = []
    for name, count in spec.components:
        if name not in sets:
            raise ValueError(f"unknown meta set {name!r}")
        pool = sets[name].train
        if count > len(pool):
            raise ValueError(
                f"component {name!r} asks for {count} samples but the train split has {len(pool)}"
            )
        picks = rng.permutation(len(pool))[:count]
        chosen.extend(pool[int(i)] for i in picks)
    order = rng.permutation(len(chosen))
    rows = rows_from_samples([chosen[int(i)] for i in order])
    inputs, targets = pad_rows(rows, PAD_ID)
    return [(inputs[i], targets[i]) for i in range(len(rows))]


# ---------------------------------------------------------------------------
# JSONL import/export


def save_samples_jsonl(samples: Sequence[Sample], path: str) -> None:
    lines = []
    for sample in samples:
        record = {"prompt": decode(sample.prompt), "full": decode(sample.full)}
        lines.append(json.dumps(record, separators=(", ", ": ")))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_samples_jsonl(path: str) -> list[Sample]:
    samples: list[Sample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                prompt_text, full_text = record["prompt"], record["full"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad sample record: {exc}") from exc
            if not full_text.startswith(prompt_text):
                raise ValueError(f"{path}:{lineno}: prompt is not a prefix of full")
            samples.append(_make_sample(prompt_text, full_text))
    return samples


def save_meta_set(ms: MetaSet, out_dir: str) -> tuple[str, str]:
    import os

    train_path = os.path.join(out_dir, f"{ms.name}.train.jsonl")
    eval_path = os.path.join(out_dir, f"{ms.name}.eval.jsonl")
    save_samples_jsonl(ms.train, train_path)
    save_samples_jsonl(ms.eval, eval_path)
    return train_path, eval_path


def load_meta_set(data_dir: str, name: str) -> MetaSet:
    import os

    train = load_samples_jsonl(os.path.join(data_dir, f"{name}.train.jsonl"))
    ev = load_samples_jsonl(os.path.join(data_dir, f"{name}.eval.jsonl"))
    return MetaSet(name=name, train=train, eval=ev)
