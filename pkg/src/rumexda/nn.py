"""Feature extractor G, classifier head C, freeze policy and LoRA adapters.

G is a stack of linear+ReLU blocks standing in for an arbitrary backbone;
the adaptation math only ever touches its output embedding, so the block
internals are irrelevant to the training strategies. The head is fixed to
linear -> ReLU -> dropout(0.3) -> linear -> 2 logits.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    unfreeze: int = 0
    adaptation: str = "none"  # "none" | "lora"
    lora_rank: int = 8
    lora_alpha: Optional[float] = None  # None -> alpha == rank, i.e. scale 1
    dropout: float = 0.3
    classifier_pairs: int = 0  # 0 -> single head, N -> N (C_i, C'_i) pairs
    seed: int = 0

    @property
    def n_blocks(self) -> int:
        return len(self.hidden_dims) + 1

    def validate(self) -> None:
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ConfigError("input_dim and feature_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_dims}")
        if self.adaptation not in ("none", "lora"):
            raise ConfigError(f"unknown adaptation {self.adaptation!r}")
        if not 0 <= self.unfreeze <= self.n_blocks:
            raise ConfigError(
                f"unfreeze={self.unfreeze} outside [0, {self.n_blocks}] for {self.n_blocks} blocks"
            )
        if self.adaptation == "lora":
            if self.lora_rank <= 0:
                raise ConfigError(f"LoRA rank must be positive, got {self.lora_rank}")
            if self.unfreeze != 0:
                raise ConfigError("LoRA keeps the whole base extractor frozen; set unfreeze=0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.classifier_pairs < 0:
            raise ConfigError("classifier_pairs must be >= 0")


def _he_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / d_in)
    return rng.uniform(-limit, limit, size=(d_out, d_in)).astype(T.get_default_dtype())


class LinearLayer:
    """weight is d_out x d_in; forward(x) computes x W^T + b row-wise."""

    def __init__(self, weight: Tensor, bias: Tensor, trainable: bool = True):
        self.weight = weight
        self.bias = bias
        self.set_trainable(trainable)

    @classmethod
    def initialize(cls, d_in: int, d_out: int, rng: np.random.Generator, trainable=True):
        w = Tensor(_he_uniform(rng, d_out, d_in))
        b = Tensor(np.zeros(d_out, dtype=T.get_default_dtype()))
        return cls(w, b, trainable)

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def set_trainable(self, flag: bool) -> None:
        self.weight.requires_grad = flag
        self.bias.requires_grad = flag

    def forward(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, T.transpose(self.weight)), self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LoraLinear:
    """A frozen linear layer plus a rank-R trainable update.

    forward(x) = base(x) + (alpha/R) * up(down(x)); ``up`` starts at zero so
    the adapter is an exact identity at initialization, and merging
    (alpha/R) * up @ down into the base weight reproduces the forward pass.
    """

    def __init__(self, base: LinearLayer, rank: int, alpha: float, rng: np.random.Generator):
        if rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        base.set_trainable(False)
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        d_out, d_in = base.weight.shape
        self.down = Tensor(_he_uniform(rng, rank, d_in), requires_grad=True)
        self.up = Tensor(np.zeros((d_out, rank), dtype=T.get_default_dtype()), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable(self) -> bool:
        return True

    def forward(self, x: Tensor) -> Tensor:
        delta = T.matmul(T.matmul(x, T.transpose(self.down)), T.transpose(self.up))
        return T.add(self.base.forward(x), T.mul(delta, self.scaling))

    def merged_weight(self) -> np.ndarray:
        return self.base.weight.data + self.scaling * (self.up.data @ self.down.data)

    def parameters(self):
        return self.base.parameters() + [("lora_down", self.down), ("lora_up", self.up)]


class FeatureExtractor:
    """Ordered linear+ReLU blocks; exactly the trailing ``unfreeze`` blocks
    are trainable (all base weights frozen under LoRA)."""

    def __init__(self, blocks: list, feature_dim: int, unfreeze: int):
        self.blocks = blocks
        self.feature_dim = feature_dim
        self.unfreeze = unfreeze

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = T.relu(block.forward(x))
        return x

    def parameters(self):
        out = []
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters():
                out.append((f"extractor.block{i}.{name}", p))
        return out


class ClassifierHead:
    """linear(f->f) -> ReLU -> dropout -> linear(f->2)."""

    def __init__(self, linear1: LinearLayer, linear2: LinearLayer, dropout_p: float = 0.3):
        self.linear1 = linear1
        self.linear2 = linear2
        self.dropout_p = dropout_p

    @classmethod
    def initialize(cls, feature_dim: int, rng: np.random.Generator, dropout_p: float = 0.3):
        return cls(
            LinearLayer.initialize(feature_dim, feature_dim, rng),
            LinearLayer.initialize(feature_dim, 2, rng),
            dropout_p,
        )

    def forward(self, z: Tensor, training: bool = False, rng=None) -> Tensor:
        h = T.relu(self.linear1.forward(z))
        h = T.dropout(h, self.dropout_p, training, rng)
        return self.linear2.forward(h)

    def parameters(self, prefix: str = "head"):
        out = []
        for lname, layer in (("linear1", self.linear1), ("linear2", self.linear2)):
            for name, p in layer.parameters():
                out.append((f"{prefix}.{lname}.{name}", p))
        return out


class ModelBundle:
    """A feature extractor plus one classifier, or 2N classifiers arranged
    as (C_i, C'_i) pairs when built with ``classifier_pairs=N``."""

    def __init__(self, config: ModelConfig, extractor: FeatureExtractor, heads: list[ClassifierHead]):
        self.config = config
        self.extractor = extractor
        self.heads = heads

    @property
    def head(self) -> ClassifierHead:
        if len(self.heads) != 1:
            raise ConfigError("bundle holds classifier pairs; use the ensemble prediction path")
        return self.heads[0]

    def pairs(self) -> list[tuple[ClassifierHead, ClassifierHead]]:
        if self.config.classifier_pairs == 0:
            raise ConfigError("bundle was not built with classifier pairs")
        return [(self.heads[2 * i], self.heads[2 * i + 1]) for i in range(self.config.classifier_pairs)]

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"input of shape {x.shape} does not match input_dim={self.config.input_dim}"
            )
        return self.head.forward(self.extractor.forward(x), training, rng)

    def extract(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"input of shape {x.shape} does not match input_dim={self.config.input_dim}"
            )
        return self.extractor.forward(x)

    def parameters(self):
        out = list(self.extractor.parameters())
        for j, head in enumerate(self.heads):
            out.extend(head.parameters(prefix=f"head{j}"))
        return out

    def trainable_parameters(self):
        return [(name, p) for name, p in self.parameters() if p.requires_grad]

    def extractor_trainable_parameters(self):
        return [(name, p) for name, p in self.extractor.parameters() if p.requires_grad]

    def head_trainable_parameters(self):
        out = []
        for j, head in enumerate(self.heads):
            out.extend((name, p) for name, p in head.parameters(prefix=f"head{j}") if p.requires_grad)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            p.data = snapshot[name].copy()


def build_model(config: ModelConfig) -> ModelBundle:
    """Deterministically initialize a bundle from its config seed.

    He-uniform weights for all linear layers, zero biases, zero LoRA ``up``
    factors (so a fresh adapter model reproduces the base forward exactly).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dims = (config.input_dim, *config.hidden_dims, config.feature_dim)
    n_blocks = len(dims) - 1
    alpha = config.lora_alpha if config.lora_alpha is not None else float(config.lora_rank)

    bases = [LinearLayer.initialize(dims[i], dims[i + 1], rng) for i in range(n_blocks)]
    n_heads = 1 if config.classifier_pairs == 0 else 2 * config.classifier_pairs
    heads = [ClassifierHead.initialize(config.feature_dim, rng, config.dropout) for _ in range(n_heads)]

    # adapter factors are drawn last so the base+head draw sequence matches
    # a plain build of the same seed; a fresh LoRA model therefore computes
    # exactly what the corresponding frozen model computes
    blocks: list = []
    for i, base in enumerate(bases):
        if config.adaptation == "lora":
            blocks.append(LoraLinear(base, config.lora_rank, alpha, rng))
        else:
            base.set_trainable(i >= n_blocks - config.unfreeze)
            blocks.append(base)
    extractor = FeatureExtractor(blocks, config.feature_dim, config.unfreeze)
    return ModelBundle(config, extractor, heads)


def trainable_parameters(bundle: ModelBundle):
    return bundle.trainable_parameters()


def trainable_parameter_count(bundle: ModelBundle) -> int:
    return sum(p.size for _, p in bundle.trainable_parameters())


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "input_dim": config.input_dim,
        "hidden_dims": list(config.hidden_dims),
        "feature_dim": config.feature_dim,
        "unfreeze": config.unfreeze,
        "adaptation": config.adaptation,
        "lora_rank": config.lora_rank,
        "lora_alpha": config.lora_alpha,
        "dropout": config.dropout,
        "classifier_pairs": config.classifier_pairs,
        "seed": config.seed,
    }


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        input_dim=int(d["input_dim"]),
        hidden_dims=tuple(int(h) for h in d["hidden_dims"]),
        feature_dim=int(d["feature_dim"]),
        unfreeze=int(d["unfreeze"]),
        adaptation=str(d["adaptation"]),
        lora_rank=int(d["lora_rank"]),
        lora_alpha=None if d["lora_alpha"] is None else float(d["lora_alpha"]),
        dropout=float(d["dropout"]),
        classifier_pairs=int(d["classifier_pairs"]),
        seed=int(d["seed"]),
    )


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write config plus all named parameters; the float payload is raw
    little-endian bytes so a reload is bit-exact."""
    params = {}
    for name, p in bundle.parameters():
        arr = np.ascontiguousarray(p.data)
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        params[name] = {
            "shape": list(arr.shape),
            "dtype": dtype,
            "data": base64.b64encode(arr.astype(dtype).tobytes()).decode("ascii"),
        }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": _config_to_dict(bundle.config),
        "parameters": params,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> ModelBundle:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    bundle = build_model(_config_from_dict(payload["config"]))
    stored = payload["parameters"]
    for name, p in bundle.parameters():
        if name not in stored:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        entry = stored[name]
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=entry["dtype"])
        p.data = arr.reshape(entry["shape"]).astype(p.data.dtype, copy=True)
    return bundle
