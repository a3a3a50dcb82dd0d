"""Training strategies: vanilla supervised, single-source moment matching,
and multi-source moment matching with classifier-discrepancy alternation.

The moment distance between two feature batches is

    MD2 = sum_{k=1,2} || mean(z_s^k) - mean(z_t^k) ||_2

with elementwise powers and batch means; the multi-source form averages the
source-target terms over the N sources and adds the pairwise source-source
terms weighted by 1/C(N,2). These losses only ever touch the feature
extractor's output, so their gradients reach G and nothing else.

The three-step alternation trains (1) the extractor and every classifier on
labeled source batches plus the weighted moment distance, (2) the
classifiers only, to stay correct on the sources while maximizing each
pair's disagreement on unlabeled target samples, and (3) the extractor
only, to minimize that disagreement.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError
from .evaluation import confusion_from_predictions, report_from_counts
from .nn import ClassifierHead, ModelBundle
from .optim import make_optimizer
from .tensor import Tensor

STRATEGIES = ("vanilla", "m2s2da", "m3sda_beta")


@dataclass
class DomainDataset:
    """Feature/label rows tagged with a domain id and optional split tags."""

    domain_id: str
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    split: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(self.features),):
                raise ShapeError("labels length does not match feature rows")
        if self.split is not None:
            self.split = np.asarray(self.split)
            if self.split.shape != (len(self.features),):
                raise ShapeError("split length does not match feature rows")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def rows(self, split: str) -> "DomainDataset":
        if self.split is None:
            raise DegenerateInputError(f"domain {self.domain_id!r} carries no split tags")
        keep = self.split == split
        return DomainDataset(
            self.domain_id,
            self.features[keep],
            None if self.labels is None else self.labels[keep],
            self.split[keep],
        )

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.domain_id, self.features, None, self.split)


@dataclass(frozen=True)
class DomainBatch:
    features: Tensor
    labels: Optional[np.ndarray]
    domain_id: str


@dataclass
class AdaptationConfig:
    strategy: str = "vanilla"
    lam: float = 0.5  # weight of the moment-distance term
    epochs: int = 30
    warmup: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    class_weights: Optional[tuple[float, float]] = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.strategy != "vanilla" and self.batch_size < 2:
            raise ConfigError("moment terms need batches of at least 2 samples")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")


class ClassifierPairSet:
    """The (C_i, C'_i) pairs of a multi-source bundle, one per source."""

    def __init__(self, pairs: Sequence[tuple[ClassifierHead, ClassifierHead]]):
        if not pairs:
            raise ConfigError("classifier pair set is empty")
        self.pairs = list(pairs)

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "ClassifierPairSet":
        return cls(bundle.pairs())


# ----------------------------------------------------------------------
# losses


def _batch_moment(z: Tensor, k: int) -> Tensor:
    return T.reduce_mean(T.pow_k(z, k), axis=0)


def moment_distance_single(z_s: Tensor, z_t: Tensor) -> Tensor:
    """First- plus second-moment distance between two feature batches."""
    if z_s.ndim != 2 or z_t.ndim != 2 or z_s.shape[1] != z_t.shape[1]:
        raise ShapeError(f"feature dims disagree: {z_s.shape} vs {z_t.shape}")
    total = None
    for k in (1, 2):
        term = T.l2_norm(T.sub(_batch_moment(z_s, k), _batch_moment(z_t, k)))
        total = term if total is None else T.add(total, term)
    return total


def moment_distance_multi(z_sources: Sequence[Tensor], z_t: Tensor) -> Tensor:
    """Multi-source moment distance: mean source-target alignment plus the
    pairwise source-source terms, each summed over moments k in {1, 2}."""
    n = len(z_sources)
    if n == 0:
        raise ConfigError("moment_distance_multi needs at least one source batch")
    for z in z_sources:
        if z.ndim != 2 or z.shape[1] != z_t.shape[1]:
            raise ShapeError(f"feature dims disagree: {z.shape} vs {z_t.shape}")
    total = None
    for k in (1, 2):
        moments = [_batch_moment(z, k) for z in z_sources]
        target_moment = _batch_moment(z_t, k)
        st = None
        for m in moments:
            term = T.l2_norm(T.sub(m, target_moment))
            st = term if st is None else T.add(st, term)
        part = T.mul(st, 1.0 / n)
        if n >= 2:
            pw = None
            for i in range(n - 1):
                for j in range(i + 1, n):
                    term = T.l2_norm(T.sub(moments[i], moments[j]))
                    pw = term if pw is None else T.add(pw, term)
            part = T.add(part, T.mul(pw, 1.0 / math.comb(n, 2)))
        total = part if total is None else T.add(total, part)
    return total


def classifier_discrepancy(p1: Tensor, p2: Tensor) -> Tensor:
    """Mean absolute difference between two probability outputs, averaged
    over batch and classes; |x| is built as relu(x) + relu(-x) so the
    subgradient at zero disagreement is zero."""
    if p1.shape != p2.shape:
        raise ShapeError(f"probability shapes disagree: {p1.shape} vs {p2.shape}")
    diff = T.sub(p1, p2)
    return T.reduce_mean(T.add(T.relu(diff), T.relu(T.mul(diff, -1.0))))


# ----------------------------------------------------------------------
# minibatch streams


class _MinibatchStream:
    """Endless shuffled minibatches of constant size (short datasets wrap)."""

    def __init__(self, features: np.ndarray, labels: Optional[np.ndarray],
                 batch_size: int, rng: np.random.Generator):
        if len(features) == 0:
            raise DegenerateInputError("cannot stream batches from an empty dataset")
        self.features = features
        self.labels = labels
        self.batch_size = batch_size
        self.rng = rng
        self._queue: list[int] = []

    def next(self) -> tuple[np.ndarray, Optional[np.ndarray]]:
        while len(self._queue) < self.batch_size:
            self._queue.extend(self.rng.permutation(len(self.features)).tolist())
        idx = self._queue[: self.batch_size]
        del self._queue[: self.batch_size]
        x = self.features[idx]
        y = None if self.labels is None else self.labels[idx]
        return x, y


# ----------------------------------------------------------------------
# history


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    source_val_f1: Optional[float]
    target_f1: dict[str, float]
    median_target_f1: Optional[float]


@dataclass
class TrainingHistory:
    strategy: str
    trainable_count: int
    records: list[EpochRecord] = field(default_factory=list)
    snapshots: list[dict[str, np.ndarray]] = field(default_factory=list)

    def val_f1_series(self) -> list[float]:
        return [r.source_val_f1 if r.source_val_f1 is not None else 0.0 for r in self.records]

    def median_target_series(self) -> list[float]:
        return [
            r.median_target_f1 if r.median_target_f1 is not None else 0.0 for r in self.records
        ]

    def to_jsonl(self, path) -> None:
        lines = []
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "epoch": r.epoch,
                        "losses": r.losses,
                        "source_val_f1": r.source_val_f1,
                        "target_f1": r.target_f1,
                        "median_target_f1": r.median_target_f1,
                        "strategy": self.strategy,
                        "trainable_parameters": self.trainable_count,
                    },
                    sort_keys=True,
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")


def read_history_jsonl(path) -> TrainingHistory:
    records = []
    strategy, count = "", 0
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        strategy = d.get("strategy", strategy)
        count = d.get("trainable_parameters", count)
        records.append(
            EpochRecord(
                epoch=int(d["epoch"]),
                losses={k: float(v) for k, v in d["losses"].items()},
                source_val_f1=d["source_val_f1"],
                target_f1={k: float(v) for k, v in d["target_f1"].items()},
                median_target_f1=d["median_target_f1"],
            )
        )
    return TrainingHistory(strategy, count, records)


# ----------------------------------------------------------------------
# prediction


def predict_ensemble(bundle: ModelBundle, x) -> Tensor:
    """Uniform average of the softmax outputs of every classifier head."""
    z = bundle.extract(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64)))
    total = None
    for head in bundle.heads:
        p = T.softmax(head.forward(z, training=False))
        total = p if total is None else T.add(total, p)
    return T.mul(total, 1.0 / len(bundle.heads))


def predict_labels(bundle: ModelBundle, features: np.ndarray) -> np.ndarray:
    """Hard 0/1 predictions; single-head bundles use their head, pair
    bundles use the uniform softmax ensemble."""
    if len(bundle.heads) == 1:
        logits = bundle.forward(Tensor(np.asarray(features, dtype=np.float64)), training=False)
        return np.argmax(logits.data, axis=1)
    probs = predict_ensemble(bundle, features)
    return np.argmax(probs.data, axis=1)


# ----------------------------------------------------------------------
# shared trainer plumbing


def _spawn_rngs(seed: int) -> tuple[np.random.Generator, np.random.SeedSequence, np.random.SeedSequence]:
    root = np.random.SeedSequence(seed)
    drop_ss, source_ss, target_ss = root.spawn(3)
    return np.random.default_rng(drop_ss), source_ss, target_ss


def _warn_if_one_class(ds: DomainDataset) -> None:
    if ds.labels is not None and ds.n > 0 and len(np.unique(ds.labels)) < 2:
        warnings.warn(
            f"training domain {ds.domain_id!r} contains a single class only", stacklevel=3
        )


def _epoch_eval(bundle: ModelBundle, val: Optional[DomainDataset],
                eval_targets: Sequence[DomainDataset]):
    val_f1 = None
    if val is not None and val.n > 0:
        counts = confusion_from_predictions(val.labels, predict_labels(bundle, val.features))
        from .evaluation import f1_precision_recall

        _, _, val_f1 = f1_precision_recall(counts)
    target_f1: dict[str, float] = {}
    median = None
    if eval_targets:
        counts_by_domain = {
            ds.domain_id: confusion_from_predictions(ds.labels, predict_labels(bundle, ds.features))
            for ds in eval_targets
        }
        report = report_from_counts(counts_by_domain)
        target_f1 = {fl.domain_id: fl.f1 for fl in report.flights}
        median = report.median_f1
    return val_f1, target_f1, median


def _finish_epoch(history: TrainingHistory, bundle: ModelBundle, epoch: int,
                  losses: dict[str, float], val, eval_targets, keep_snapshots: bool) -> None:
    val_f1, target_f1, median = _epoch_eval(bundle, val, eval_targets)
    history.records.append(EpochRecord(epoch, losses, val_f1, target_f1, median))
    if keep_snapshots:
        history.snapshots.append(bundle.snapshot())


# ----------------------------------------------------------------------
# vanilla


def train_vanilla(bundle: ModelBundle, train: DomainDataset, config: AdaptationConfig,
                  val: Optional[DomainDataset] = None,
                  eval_targets: Sequence[DomainDataset] = (),
                  keep_snapshots: bool = True) -> TrainingHistory:
    """Standard supervised training on the pooled labeled source."""
    config.validate()
    if train.labels is None:
        raise DegenerateInputError("vanilla training needs labeled source data")
    _warn_if_one_class(train)
    drop_rng, source_ss, _ = _spawn_rngs(config.seed)
    stream = _MinibatchStream(train.features, train.labels, config.batch_size,
                              np.random.default_rng(source_ss))
    params = [p for _, p in bundle.trainable_parameters()]
    opt = make_optimizer(config.optimizer, params, config.lr)
    history = TrainingHistory("vanilla", sum(p.size for p in params))
    steps = max(1, math.ceil(train.n / config.batch_size))
    for epoch in range(1, config.epochs + 1):
        ce_sum = 0.0
        for _ in range(steps):
            x, y = stream.next()
            logits = bundle.forward(Tensor(x), training=True, rng=drop_rng)
            loss = T.softmax_cross_entropy(logits, y, config.class_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ce_sum += loss.item()
        _finish_epoch(history, bundle, epoch, {"ce": ce_sum / steps}, val, eval_targets,
                      keep_snapshots)
    return history


# ----------------------------------------------------------------------
# single-source moment matching


def train_m2s2da(bundle: ModelBundle, source: DomainDataset, target: DomainDataset,
                 config: AdaptationConfig,
                 val: Optional[DomainDataset] = None,
                 eval_targets: Sequence[DomainDataset] = (),
                 keep_snapshots: bool = True) -> TrainingHistory:
    """Cross entropy on the labeled source plus lambda times the moment
    distance between source and (unlabeled) target feature batches.

    The moment term's gradient reaches only the extractor; with lambda = 0
    the run is step-for-step identical to ``train_vanilla`` under the same
    seed.
    """
    config.validate()
    if source.labels is None:
        raise DegenerateInputError("moment-matching training needs labeled source data")
    if target.n == 0:
        raise ConfigError("m2s2da needs a non-empty unlabeled target stream")
    _warn_if_one_class(source)
    drop_rng, source_ss, target_ss = _spawn_rngs(config.seed)
    src_stream = _MinibatchStream(source.features, source.labels, config.batch_size,
                                  np.random.default_rng(source_ss))
    tgt_stream = None
    if config.lam > 0:
        tgt_stream = _MinibatchStream(target.features, None, config.batch_size,
                                      np.random.default_rng(target_ss))
    params = [p for _, p in bundle.trainable_parameters()]
    opt = make_optimizer(config.optimizer, params, config.lr)
    history = TrainingHistory("m2s2da", sum(p.size for p in params))
    steps = max(1, math.ceil(source.n / config.batch_size))
    for epoch in range(1, config.epochs + 1):
        ce_sum = md2_sum = 0.0
        for _ in range(steps):
            x, y = src_stream.next()
            z_s = bundle.extract(Tensor(x))
            logits = bundle.head.forward(z_s, training=True, rng=drop_rng)
            loss = T.softmax_cross_entropy(logits, y, config.class_weights)
            ce_sum += loss.item()
            if tgt_stream is not None:
                xt, _ = tgt_stream.next()
                z_t = bundle.extract(Tensor(xt))
                md2 = moment_distance_single(z_s, z_t)
                md2_sum += md2.item()
                loss = T.add(loss, T.mul(md2, config.lam))
            opt.zero_grad()
            loss.backward()
            opt.step()
        _finish_epoch(history, bundle, epoch, {"ce": ce_sum / steps, "md2": md2_sum / steps},
                      val, eval_targets, keep_snapshots)
    return history


# ----------------------------------------------------------------------
# multi-source moment matching with classifier discrepancy


class M3sdaStepper:
    """One iteration of the three-step alternation, exposed step by step.

    Separate optimizers over the extractor and the classifier parameters
    make the freeze contracts structural: step 2 never steps the extractor
    optimizer and step 3 never steps the classifier one.
    """

    def __init__(self, bundle: ModelBundle, config: AdaptationConfig,
                 drop_rng: np.random.Generator):
        self.bundle = bundle
        self.pairs = ClassifierPairSet.from_bundle(bundle).pairs
        self.config = config
        self.drop_rng = drop_rng
        self.opt_g = make_optimizer(
            config.optimizer, [p for _, p in bundle.extractor_trainable_parameters()], config.lr
        )
        self.opt_heads = make_optimizer(
            config.optimizer, [p for _, p in bundle.head_trainable_parameters()], config.lr
        )

    def _pair_ce(self, z_list: list[Tensor], batches: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
        total = None
        for (c, c_prime), z, (_, y) in zip(self.pairs, z_list, batches):
            for head in (c, c_prime):
                logits = head.forward(z, training=True, rng=self.drop_rng)
                ce = T.softmax_cross_entropy(logits, y, self.config.class_weights)
                total = ce if total is None else T.add(total, ce)
        return total

    def _pair_discrepancy(self, z_t: Tensor) -> Tensor:
        total = None
        for c, c_prime in self.pairs:
            p1 = T.softmax(c.forward(z_t, training=True, rng=self.drop_rng))
            p2 = T.softmax(c_prime.forward(z_t, training=True, rng=self.drop_rng))
            term = classifier_discrepancy(p1, p2)
            total = term if total is None else T.add(total, term)
        return total

    def step_classify(self, batches, x_t: np.ndarray) -> tuple[float, float]:
        """Step 1: update G and all heads on source CE + lambda * MD2."""
        z_list = [self.bundle.extract(Tensor(x)) for x, _ in batches]
        loss = self._pair_ce(z_list, batches)
        ce_value = loss.item()
        md2_value = 0.0
        if self.config.lam > 0:
            z_t = self.bundle.extract(Tensor(x_t))
            md2 = moment_distance_multi(z_list, z_t)
            md2_value = md2.item()
            loss = T.add(loss, T.mul(md2, self.config.lam))
        self.opt_g.zero_grad()
        self.opt_heads.zero_grad()
        loss.backward()
        self.opt_g.step()
        self.opt_heads.step()
        return ce_value, md2_value

    def step_max_discrepancy(self, batches, x_t: np.ndarray) -> float:
        """Step 2: with G fixed, push classifier pairs apart on the target
        while keeping them correct on the sources."""
        z_list = [self.bundle.extract(Tensor(x)) for x, _ in batches]
        z_t = self.bundle.extract(Tensor(x_t))
        disc = self._pair_discrepancy(z_t)
        disc_value = disc.item()
        loss = T.sub(self._pair_ce(z_list, batches), disc)
        self.opt_g.zero_grad()
        self.opt_heads.zero_grad()
        loss.backward()
        self.opt_heads.step()
        return disc_value

    def step_min_discrepancy(self, x_t: np.ndarray) -> float:
        """Step 3: with the heads fixed, pull the pairs together through G."""
        z_t = self.bundle.extract(Tensor(x_t))
        disc = self._pair_discrepancy(z_t)
        disc_value = disc.item()
        self.opt_g.zero_grad()
        self.opt_heads.zero_grad()
        disc.backward()
        self.opt_g.step()
        return disc_value

    def discrepancy_eval(self, x_t: np.ndarray) -> float:
        """Summed pair discrepancy on a batch with dropout off; no update."""
        z_t = self.bundle.extract(Tensor(np.asarray(x_t, dtype=np.float64)))
        total = 0.0
        for c, c_prime in self.pairs:
            p1 = T.softmax(c.forward(z_t, training=False))
            p2 = T.softmax(c_prime.forward(z_t, training=False))
            total += classifier_discrepancy(p1, p2).item()
        return total


def train_m3sda_beta(bundle: ModelBundle, sources: Sequence[DomainDataset],
                     target: DomainDataset, config: AdaptationConfig,
                     val: Optional[DomainDataset] = None,
                     eval_targets: Sequence[DomainDataset] = (),
                     keep_snapshots: bool = True,
                     step_observer: Optional[Callable[[str, int, ModelBundle], None]] = None
                     ) -> TrainingHistory:
    """The full three-step alternation over epochs of per-domain batches.

    One minibatch per source domain plus one target batch feed all three
    steps of an iteration. ``step_observer(phase, iteration, bundle)`` is
    called around steps 2 and 3 (phases "step2_pre", "step2_post",
    "step3_pre", "step3_post") so freeze contracts can be audited.
    """
    config.validate()
    n = len(sources)
    if n == 0:
        raise ConfigError("m3sda_beta needs at least one source domain")
    if bundle.config.classifier_pairs != n:
        raise ConfigError(
            f"bundle has {bundle.config.classifier_pairs} classifier pairs "
            f"but {n} source domains were provided"
        )
    if target.n == 0:
        raise ConfigError("m3sda_beta needs a non-empty unlabeled target stream")
    for ds in sources:
        if ds.labels is None:
            raise DegenerateInputError(f"source domain {ds.domain_id!r} has no labels")
        _warn_if_one_class(ds)

    drop_rng, source_ss, target_ss = _spawn_rngs(config.seed)
    src_children = source_ss.spawn(n)
    src_streams = [
        _MinibatchStream(ds.features, ds.labels, config.batch_size, np.random.default_rng(child))
        for ds, child in zip(sources, src_children)
    ]
    tgt_stream = _MinibatchStream(target.features, None, config.batch_size,
                                  np.random.default_rng(target_ss))
    stepper = M3sdaStepper(bundle, config, drop_rng)
    history = TrainingHistory(
        "m3sda_beta", sum(p.size for _, p in bundle.trainable_parameters())
    )
    steps = max(1, math.ceil(max(ds.n for ds in sources) / config.batch_size))
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        sums = {"ce": 0.0, "md2": 0.0, "disc_max": 0.0, "disc_min": 0.0}
        for _ in range(steps):
            iteration += 1
            batches = [stream.next() for stream in src_streams]
            x_t, _ = tgt_stream.next()
            ce, md2 = stepper.step_classify(batches, x_t)
            if step_observer:
                step_observer("step2_pre", iteration, bundle)
            disc_max = stepper.step_max_discrepancy(batches, x_t)
            if step_observer:
                step_observer("step2_post", iteration, bundle)
                step_observer("step3_pre", iteration, bundle)
            disc_min = stepper.step_min_discrepancy(x_t)
            if step_observer:
                step_observer("step3_post", iteration, bundle)
            sums["ce"] += ce
            sums["md2"] += md2
            sums["disc_max"] += disc_max
            sums["disc_min"] += disc_min
        losses = {k: v / steps for k, v in sums.items()}
        _finish_epoch(history, bundle, epoch, losses, val, eval_targets, keep_snapshots)
    return history
