"""Micro decoder-only transformer with exact float64 numerics.

Architecture: learned absolute position embeddings stored as extra rows of the
token embedding table, pre-norm blocks with RMS normalization, causal
multi-head attention, a SiLU-gated MLP, no biases anywhere, and a separate
output projection. Everything is float64 and fully deterministic: same config,
same seed, same bytes.

The forward pass is written once against the `autodiff` primitives, so calling
it with plain arrays gives inference and calling it with wrapped leaves gives
reverse-mode gradients with respect to every weight tensor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .ioutil import atomic_write_bytes

MAGIC = b"SOUPCKPT"
FORMAT_VERSION = 1
INIT_STD = 0.02

PER_LAYER_KINDS = (
    "input_norm",
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_o",
    "post_attn_norm",
    "mlp_gate",
    "mlp_up",
    "mlp_down",
)
GLOBAL_KINDS = ("embed", "final_norm", "lm_head")
UNIT_KINDS = ("embed",) + PER_LAYER_KINDS + ("final_norm", "lm_head")

_NORM_KINDS = {"input_norm", "post_attn_norm", "final_norm"}


class NonFiniteLossError(RuntimeError):
    """Raised when training hits non-finite numbers; carries the step index."""

    def __init__(self, step: int, detail: str = "non-finite loss"):
        super().__init__(f"{detail} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    rms_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not (self.rms_eps > 0.0):
            raise ValueError(f"rms_eps must be positive, got {self.rms_eps!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class SoupUnitId:
    """One independently mergeable slice of the network: a kind plus an optional layer."""

    kind: str
    layer: int | None = None

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}")
        if self.kind in PER_LAYER_KINDS:
            if self.layer is None or self.layer < 0:
                raise ValueError(f"unit kind {self.kind!r} needs a layer index")
        elif self.layer is not None:
            raise ValueError(f"unit kind {self.kind!r} is global and takes no layer")

    def tensor_name(self) -> str:
        if self.kind == "embed":
            return "embed.weight"
        if self.kind == "final_norm":
            return "final_norm.weight"
        if self.kind == "lm_head":
            return "lm_head.weight"
        if self.kind in ("input_norm", "post_attn_norm"):
            return f"layers.{self.layer}.{self.kind}.weight"
        if self.kind.startswith("attn_"):
            return f"layers.{self.layer}.attn.{self.kind[5:]}.weight"
        return f"layers.{self.layer}.mlp.{self.kind[4:]}.weight"


def enumerate_units(config: ModelConfig) -> list[SoupUnitId]:
    """Canonical unit order: embed, each layer's nine units, final norm, output head."""
    units = [SoupUnitId("embed")]
    for layer in range(config.n_layers):
        units.extend(SoupUnitId(kind, layer) for kind in PER_LAYER_KINDS)
    units.append(SoupUnitId("final_norm"))
    units.append(SoupUnitId("lm_head"))
    return units


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (config.vocab_size + config.max_seq_len, d)
    }
    for layer in range(config.n_layers):
        shapes[f"layers.{layer}.input_norm.weight"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"layers.{layer}.attn.{proj}.weight"] = (d, d)
        shapes[f"layers.{layer}.post_attn_norm.weight"] = (d,)
        shapes[f"layers.{layer}.mlp.gate.weight"] = (d, ff)
        shapes[f"layers.{layer}.mlp.up.weight"] = (d, ff)
        shapes[f"layers.{layer}.mlp.down.weight"] = (ff, d)
    shapes["final_norm.weight"] = (d,)
    shapes["lm_head.weight"] = (d, config.vocab_size)
    return shapes


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    lineage: list[str] = field(default_factory=list)
    seed: int = 0

    def copy_tensors(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.tensors.items()}


def validate_checkpoint(ckpt: Checkpoint) -> None:
    expected = tensor_shapes(ckpt.config)
    missing = expected.keys() - ckpt.tensors.keys()
    if missing:
        raise ValueError(f"checkpoint is missing tensor {sorted(missing)[0]!r}")
    extra = ckpt.tensors.keys() - expected.keys()
    if extra:
        raise ValueError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    for name, shape in expected.items():
        arr = ckpt.tensors[name]
        if arr.shape != shape:
            raise ValueError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}"
            )
        if arr.dtype != np.float64:
            raise ValueError(f"tensor {name!r} must be float64, got {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")


def init_ancestor(config: ModelConfig, seed: int) -> Checkpoint:
    """Fresh checkpoint: normal(0, 0.02) weights, norm gains at one."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for unit in enumerate_units(config):
        name = unit.tensor_name()
        shape = tensor_shapes(config)[name]
        if unit.kind in _NORM_KINDS:
            tensors[name] = np.ones(shape, dtype=np.float64)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
    return Checkpoint(config=config, tensors=tensors, lineage=["ancestor"], seed=seed)


# ---------------------------------------------------------------------------
# serialization


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    validate_checkpoint(ckpt)
    order = [u.tensor_name() for u in enumerate_units(ckpt.config)]
    index: dict[str, dict] = {}
    payload = bytearray()
    for name in order:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float64)
        index[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload.extend(arr.astype("<f8", copy=False).tobytes())
    header = {
        "config": asdict(ckpt.config),
        "lineage": list(ckpt.lineage),
        "seed": int(ckpt.seed),
        "tensors": index,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<B", FORMAT_VERSION) + struct.pack("<I", len(header_bytes))
    atomic_write_bytes(path, blob + header_bytes + bytes(payload))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 5:
        raise ValueError("checkpoint file is too short to hold a header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("bad magic: not a checkpoint file")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC) + 1)
    header_start = len(MAGIC) + 5
    if header_start + header_len > len(blob):
        raise ValueError("checkpoint header is truncated")
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"checkpoint header is not valid JSON: {exc}") from exc
    try:
        config = ModelConfig(**header["config"])
        index = header["tensors"]
        lineage = [str(x) for x in header["lineage"]]
        seed = int(header["seed"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"checkpoint header is missing required fields: {exc}") from exc

    expected = tensor_shapes(config)
    missing = expected.keys() - index.keys()
    if missing:
        raise ValueError(f"checkpoint is missing tensor {sorted(missing)[0]!r}")
    extra = index.keys() - expected.keys()
    if extra:
        raise ValueError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")

    data = blob[header_start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name in expected:
        entry = index[name]
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise ValueError(f"tensor {name!r} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        end = start + count * 8
        if start < 0 or end > len(data):
            raise ValueError(f"unexpected end of tensor data for {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        arr = arr.astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        tensors[name] = arr
    ckpt = Checkpoint(config=config, tensors=tensors, lineage=lineage, seed=seed)
    validate_checkpoint(ckpt)
    return ckpt


# ---------------------------------------------------------------------------
# forward pass


def _rms_norm(x, weight, eps):
    ms = ad.mean_last(ad.mul(x, x))
    return ad.mul(ad.mul(x, ad.rsqrt(ad.add(ms, eps))), weight)


def _causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t), dtype=np.float64)
    mask[np.triu_indices(t, k=1)] = -1e30
    return mask


def _attention(x, params, prefix: str, config: ModelConfig, mask: np.ndarray):
    b_t_shape = np.shape(ad.val(x))
    b, t = b_t_shape[0], b_t_shape[1]
    h, dh = config.n_heads, config.head_dim

    def heads(proj):
        out = ad.matmul(x, params[f"{prefix}.{proj}.weight"])
        return ad.swapaxes(ad.reshape(out, (b, t, h, dh)), 1, 2)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    probs = ad.softmax_last(ad.add(scores, mask))
    ctx = ad.reshape(ad.swapaxes(ad.matmul(probs, v), 1, 2), (b, t, h * dh))
    return ad.matmul(ctx, params[f"{prefix}.o.weight"])


def _logits(params: Mapping, tokens: np.ndarray, config: ModelConfig):
    """Token ids (batch, time) to logits (batch, time, vocab); params may be Nodes."""
    b, t = tokens.shape
    embed = params["embed.weight"]
    pos_ids = config.vocab_size + np.arange(t)
    hidden = ad.add(ad.take_rows(embed, tokens), ad.take_rows(embed, pos_ids))
    mask = _causal_mask(t)
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        normed = _rms_norm(hidden, params[f"{prefix}.input_norm.weight"], config.rms_eps)
        hidden = ad.add(hidden, _attention(normed, params, f"{prefix}.attn", config, mask))
        normed = _rms_norm(hidden, params[f"{prefix}.post_attn_norm.weight"], config.rms_eps)
        gate = ad.silu(ad.matmul(normed, params[f"{prefix}.mlp.gate.weight"]))
        up = ad.matmul(normed, params[f"{prefix}.mlp.up.weight"])
        hidden = ad.add(hidden, ad.matmul(ad.mul(gate, up), params[f"{prefix}.mlp.down.weight"]))
    final = _rms_norm(hidden, params["final_norm.weight"], config.rms_eps)
    return ad.matmul(final, params["lm_head.weight"])


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be a (batch, time) array, got ndim {tokens.ndim}")
    if tokens.shape[1] < 1:
        raise ValueError("tokens must contain at least one position")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    return tokens.astype(np.int64)


def forward(ckpt: Checkpoint, tokens: np.ndarray) -> np.ndarray:
    """Logits for a batch, inference mode."""
    tokens = _check_tokens(ckpt.config, tokens)
    with np.errstate(all="ignore"):
        return _logits(ckpt.tensors, tokens, ckpt.config)


def nll_loss(logits: np.ndarray, targets: np.ndarray, pad_id: int) -> float:
    """Mean next-token negative log likelihood; positions with pad targets carry no loss."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"logits shape {logits.shape} does not align with targets shape {targets.shape}"
        )
    mask = (targets != pad_id).astype(np.float64)
    if mask.sum() == 0:
        raise ValueError("empty loss support: every target position is padding")
    safe_targets = np.where(targets == pad_id, 0, targets)
    with np.errstate(all="ignore"):
        return ad.masked_mean_cross_entropy_value(logits, safe_targets, mask)


def loss_and_weight_grads(
    ckpt: Checkpoint, inputs: np.ndarray, targets: np.ndarray, pad_id: int
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus the gradient of the loss with respect to every weight tensor."""
    inputs = _check_tokens(ckpt.config, inputs)
    targets = np.asarray(targets)
    mask = (targets != pad_id).astype(np.float64)
    if mask.sum() == 0:
        raise ValueError("empty loss support: every target position is padding")
    safe_targets = np.where(targets == pad_id, 0, targets).astype(np.int64)
    leaves = {name: ad.leaf(arr) for name, arr in ckpt.tensors.items()}
    with np.errstate(all="ignore"):
        logits = _logits(leaves, inputs, ckpt.config)
        loss = ad.masked_mean_cross_entropy(logits, safe_targets, mask)
        ad.backward(loss)
    grads = {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in leaves.items()
    }
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction; operates functionally on dicts of arrays."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.step_count += 1
        t = self.step_count
        out = {}
        for key, value in params.items():
            g = grads[key]
            m = self._m.get(key)
            v = self._v.get(key)
            m = self.beta1 * m + (1 - self.beta1) * g if m is not None else (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g if v is not None else (1 - self.beta2) * g * g
            self._m[key] = m
            self._v[key] = v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            out[key] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass(frozen=True)
class TrainConfig:
    """Weight finetuning settings."""

    learning_rate: float
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def epoch_batches(n_rows: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    perm = rng.permutation(n_rows)
    for start in range(0, n_rows, batch_size):
        yield perm[start : start + batch_size]


def train_weights(
    ckpt: Checkpoint,
    dataset: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    tag: str,
    pad_id: int,
) -> tuple[Checkpoint, list[tuple[int, float]]]:
    """Finetune every weight tensor on (input, target) rows; returns a new checkpoint.

    The incoming checkpoint is never mutated. History holds (step, loss) pairs.
    """
    if not dataset:
        raise ValueError("empty training set")
    from .data import pad_rows  # row padding lives beside the data plumbing

    rng = np.random.default_rng(cfg.seed)
    params = ckpt.copy_tensors()
    opt = Adam(cfg.learning_rate)
    history: list[tuple[int, float]] = []
    step = 0
    for _ in range(cfg.epochs):
        for batch_idx in epoch_batches(len(dataset), cfg.batch_size, rng):
            rows = [dataset[i] for i in batch_idx]
            inputs, targets = pad_rows(rows, pad_id)
            work = Checkpoint(ckpt.config, params, ckpt.lineage, ckpt.seed)
            loss, grads = loss_and_weight_grads(work, inputs, targets, pad_id)
            if not np.isfinite(loss):
                raise NonFiniteLossError(step)
            params = opt.step(params, grads)
            history.append((step, loss))
            step += 1
    return (
        Checkpoint(
            config=ckpt.config,
            tensors=params,
            lineage=[f"finetune:{tag}"] + list(ckpt.lineage),
            seed=cfg.seed,
        ),
        history,
    )
