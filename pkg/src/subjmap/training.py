"""Optimizers, the training loop, subject fine-tuning and the gradient gate.

The loop is deliberately plain: seeded shuffling, mini-batches that may mix
subjects, SGD or Adam, optional gradient clipping, QR re-projection of every
decomposed map's square factor after each ``orth_every`` steps, early
stopping on validation loss, and a best-validation snapshot.  Everything is
deterministic given the config seed.

``finetune_subjects`` implements generalization to unseen subjects: new
per-subject rows are appended to the maps and are the only parameters the
optimizer ever touches, so nothing previously learned can be forgotten.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .datasets import MultiSubjectDataset, stacked
from .errors import DivergenceError, EmptySubset, InvalidFraction, ShapeError
from .linalg import SeededRng, qr_orthonormalize
from .maps import DecomposedMap, SubjectMap
from .models import Model, ModelSpec, build_model, encode, loss, loss_and_grads, softmax


def canonical_digest(obj) -> str:
    """Stable SHA-256 of a JSON-serializable object; key order and whitespace do not matter."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    orth_every: int = 1
    early_stop_patience: int | None = 20
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def digest(self) -> str:
        return canonical_digest(asdict(self))


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    val_metrics: list[float | None] = field(default_factory=list)
    best_epoch: int = -1
    n_steps: int = 0
    wall_clock_seconds: float = 0.0
    config_hash: str = ""
    final_metrics: dict = field(default_factory=dict)

    @property
    def n_epochs(self) -> int:
        return len(self.train_losses)

    def to_json(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "val_metrics": self.val_metrics,
            "best_epoch": self.best_epoch,
            "n_steps": self.n_steps,
            "wall_clock_seconds": self.wall_clock_seconds,
            "config_hash": self.config_hash,
            "final_metrics": self.final_metrics,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss,metric\n")
            for i in range(self.n_epochs):
                metric = self.val_metrics[i]
                fh.write(f"{i},{self.train_losses[i]!r},{self.val_losses[i]!r},"
                         f"{'' if metric is None else repr(metric)}\n")


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(config.lr)
    return Adam(config.lr, config.beta1, config.beta2, config.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def _reproject(model: Model) -> None:
    for dmap in model.decomposed_maps():
        dmap.u[...] = qr_orthonormalize(dmap.u)


def evaluate_loss(model: Model, dataset: MultiSubjectDataset) -> tuple[float, float | None]:
    """Full-batch loss plus accuracy for classifier objectives."""
    x, idx, labels = stacked(dataset, model)
    value, _ = loss(model, x, idx, labels)
    metric = None
    if model.spec.objective == "classifier":
        lat = encode(model, x, idx)
        pred = np.argmax(softmax(lat.z), axis=1)
        metric = float((pred == labels).mean())
    return value, metric


def accuracy(model: Model, dataset: MultiSubjectDataset) -> float:
    x, idx, labels = stacked(dataset, model)
    lat = encode(model, x, idx)
    return float((np.argmax(softmax(lat.z), axis=1) == labels).mean())


def train(model: Model, train_set: MultiSubjectDataset, val_set: MultiSubjectDataset,
          config: TrainConfig) -> tuple[Model, TrainHistory]:
    """Optimize ``model`` in place; returns it restored to the best-validation epoch.

    Every ``orth_every`` steps each decomposed map's square factor is
    re-orthonormalized by QR.  Raises DivergenceError with the offending step
    index if the loss leaves the finite range.
    """
    started = time.perf_counter()
    rng = SeededRng(config.seed)
    x, idx, labels = stacked(train_set, model)
    if x.shape[0] == 0:
        raise EmptySubset("training set has no timesteps")

    params = model.params()
    optimizer = make_optimizer(config)
    needs_noise = model.spec.objective == "vae"

    history = TrainHistory(config_hash=config.digest())
    best_val = math.inf
    best_snap = model.snapshot()
    history.best_epoch = -1
    step = 0
    since_best = 0

    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        epoch_loss = 0.0
        seen = 0
        for start in range(0, x.shape[0], config.batch_size):
            rows = order[start:start + config.batch_size]
            batch_labels = labels[rows] if labels is not None else None
            noise = rng if needs_noise else None
            value, _, grads = loss_and_grads(model, x[rows], idx[rows], batch_labels, noise)
            if not math.isfinite(value):
                raise DivergenceError(step)
            if config.grad_clip is not None:
                clip_gradients(grads, config.grad_clip)
            optimizer.step(params, {k: grads[k] for k in params})
            step += 1
            if config.orth_every and step % config.orth_every == 0:
                _reproject(model)
            epoch_loss += value * len(rows)
            seen += len(rows)

        val_loss, val_metric = evaluate_loss(model, val_set)
        if not math.isfinite(val_loss):
            raise DivergenceError(step, f"non-finite validation loss after step {step}")
        history.train_losses.append(epoch_loss / seen)
        history.val_losses.append(val_loss)
        history.val_metrics.append(val_metric)

        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_snap = model.snapshot()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if config.early_stop_patience is not None and since_best >= config.early_stop_patience:
                break

    if history.best_epoch >= 0:
        model.restore(best_snap)
    history.n_steps = step
    history.wall_clock_seconds = time.perf_counter() - started
    if history.val_losses:
        history.final_metrics = {"val_loss": history.val_losses[history.best_epoch]}
        metric = history.val_metrics[history.best_epoch]
        if metric is not None:
            history.final_metrics["val_accuracy"] = metric
    return model, history


def grad_check(model: Model, x, subject_idx, labels=None, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Intended for small models (<= ~20k parameters).  VAE models are checked
    in posterior-mean mode so the objective is deterministic.
    """
    _, _, analytic = loss_and_grads(model, x, subject_idx, labels)
    worst = 0.0
    for name, p in model.params().items():
        ga = analytic[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus, _ = loss(model, x, subject_idx, labels)
            flat[i] = orig - h
            minus, _ = loss(model, x, subject_idx, labels)
            flat[i] = orig
            fd = (plus - minus) / (2.0 * h)
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - fd) / max(1e-8, abs(ana) + abs(fd))
            worst = max(worst, err)
    return worst


def parameter_digest(model: Model, exclude_subject_rows: tuple[int, ...] = ()) -> str:
    """SHA-256 over all parameter bytes, skipping the given per-subject rows.

    Used to certify that fine-tuning left every pre-existing weight
    bit-identical.
    """
    excluded = set(exclude_subject_rows)
    digest = hashlib.sha256()
    for name, arr in sorted(model.params().items()):
        per_subject = name.endswith("_map.s") or (
            name.endswith("_map.w") and arr.ndim == 3)
        if per_subject and excluded:
            keep = [i for i in range(arr.shape[0]) if i not in excluded]
            payload = arr[keep]
        else:
            payload = arr
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(payload, dtype=np.float64).tobytes())
    return digest.hexdigest()


@dataclass
class FinetuneResult:
    model: Model
    new_subject_ids: tuple[str, ...]
    new_indices: np.ndarray
    enc_rows: np.ndarray
    dec_rows: np.ndarray | None
    history: TrainHistory


def _per_subject_views(model: Model, start: int) -> dict[str, np.ndarray]:
    views: dict[str, np.ndarray] = {}
    for prefix, m in (("enc_map", model.enc_map), ("dec_map", model.dec_map)):
        if isinstance(m, DecomposedMap):
            views[f"{prefix}.s"] = m.s[start:]
        elif isinstance(m, SubjectMap):
            views[f"{prefix}.w"] = m.w[start:]
    return views


def add_subjects(model: Model, new_ids) -> np.ndarray:
    """Register unseen subjects on a subject/decomposed model; returns their indices.

    New decomposed rows start at the mean of the training rows, which
    centers each new subject in the learned weight distribution.
    """
    new_ids = tuple(new_ids)
    if model.spec.variant == "group":
        raise ValueError("group models have no per-subject weights to add")
    clash = set(new_ids) & set(model.subject_ids)
    if clash:
        raise ValueError(f"subjects already registered: {sorted(clash)}")
    count = len(new_ids)
    for m in (model.enc_map, model.dec_map):
        if isinstance(m, (DecomposedMap, SubjectMap)):
            m.add_subjects(count)
    start = len(model.subject_ids)
    model.subject_ids = model.subject_ids + new_ids
    model.spec = replace(model.spec, n_subjects=model.spec.n_subjects + count)
    return np.arange(start, start + count)


def finetune_subjects(model: Model, new_data: MultiSubjectDataset, fraction: float,
                      config: TrainConfig) -> FinetuneResult:
    """Fit per-subject weights for unseen subjects with everything else frozen.

    Only the leading ceil(fraction * T) timesteps of each new subject are
    used.  Optimization runs on the appended rows alone and stops when the
    relative loss change over a 10-step window drops below 1e-5 (or at the
    config epoch cap).
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidFraction(f"fraction must be in (0, 1], got {fraction}")

    subset_subjects = []
    for rec in new_data.subjects:
        count = math.ceil(fraction * rec.data.shape[0])
        if count < 1:
            raise EmptySubset(f"subject {rec.subject_id!r} has no timesteps to fine-tune on")
        subset_subjects.append(rec.take(np.arange(count)))
    subset = MultiSubjectDataset(subset_subjects, dict(new_data.metadata))

    new_idx = add_subjects(model, [rec.subject_id for rec in new_data.subjects])
    start = int(new_idx[0])
    views = _per_subject_views(model, start)

    x, idx, labels = stacked(subset, model)
    rng = SeededRng(config.seed)
    optimizer = make_optimizer(config)
    needs_noise = model.spec.objective == "vae"

    history = TrainHistory(config_hash=config.digest())
    window: list[float] = []
    step = 0
    started = time.perf_counter()
    for _epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        epoch_loss = 0.0
        for begin in range(0, x.shape[0], config.batch_size):
            rows = order[begin:begin + config.batch_size]
            batch_labels = labels[rows] if labels is not None else None
            noise = rng if needs_noise else None
            value, _, grads = loss_and_grads(model, x[rows], idx[rows], batch_labels, noise)
            if not math.isfinite(value):
                raise DivergenceError(step)
            if config.grad_clip is not None:
                clip_gradients(grads, config.grad_clip)
            optimizer.step(views, {name: grads[name][start:] for name in views})
            epoch_loss += value * len(rows)
            step += 1
            window.append(value)
            if len(window) > 10:
                window.pop(0)
        history.train_losses.append(epoch_loss / x.shape[0])
        history.val_losses.append(history.train_losses[-1])
        history.val_metrics.append(None)
        if len(window) == 10 and window[0] > 0:
            if abs(window[0] - window[-1]) / abs(window[0]) < 1e-5:
                break
    history.n_steps = step
    history.best_epoch = history.n_epochs - 1
    history.wall_clock_seconds = time.perf_counter() - started

    enc_rows = (model.enc_map.s[start:].copy() if isinstance(model.enc_map, DecomposedMap)
                else model.enc_map.w[start:].copy())
    dec_rows = None
    if isinstance(model.dec_map, DecomposedMap):
        dec_rows = model.dec_map.s[start:].copy()
    elif isinstance(model.dec_map, SubjectMap):
        dec_rows = model.dec_map.w[start:].copy()
    return FinetuneResult(model=model, new_subject_ids=tuple(r.subject_id for r in new_data.subjects),
                          new_indices=new_idx, enc_rows=enc_rows, dec_rows=dec_rows,
                          history=history)


# --- hyperparameter sweep -------------------------------------------------

_SPEC_FIELDS = {f for f in ModelSpec.__dataclass_fields__}
_CONFIG_FIELDS = {f for f in TrainConfig.__dataclass_fields__}


def _split_setting(setting: dict) -> tuple[dict, dict]:
    spec_part, config_part = {}, {}
    for key, value in setting.items():
        if key in _SPEC_FIELDS:
            spec_part[key] = value
        elif key in _CONFIG_FIELDS:
            config_part[key] = value
        else:
            raise ValueError(f"unknown sweep setting key {key!r}")
    return spec_part, config_part


def _sweep_cell(args):
    (index, setting, seed, spec, base_config, train_set, val_set, test_set) = args
    row = {"setting_index": index, "seed": seed, "error": None,
           "val_loss": math.nan, "val_metric": math.nan, "test_metric": math.nan}
    row.update(setting)
    try:
        spec_part, config_part = _split_setting(setting)
        cell_spec = replace(spec, **spec_part)
        config = replace(base_config, seed=seed, **config_part)
        model = build_model(cell_spec, SeededRng(seed).derive("init").seed,
                            subject_ids=[r.subject_id for r in train_set.subjects])
        model, history = train(model, train_set, val_set, config)
        row["val_loss"] = history.final_metrics.get("val_loss", math.nan)
        row["val_metric"] = history.final_metrics.get(
            "val_accuracy", row["val_loss"])
        if test_set is not None:
            if cell_spec.objective == "classifier":
                row["test_metric"] = accuracy(model, test_set)
            else:
                row["test_metric"], _ = evaluate_loss(model, test_set)
    except Exception as exc:  # cell failures must not abort the sweep
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


@dataclass
class SweepResult:
    rows: list[dict]
    setting_means: list[float]
    winner_index: int
    metric: str

    def winner_rows(self) -> list[dict]:
        return [r for r in self.rows if r["setting_index"] == self.winner_index]

    def winner_test_mean(self) -> float:
        vals = [r["test_metric"] for r in self.winner_rows()
                if r["error"] is None and not math.isnan(r["test_metric"])]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self, path) -> None:
        keys = sorted({k for r in self.rows for k in r})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            for row in self.rows:
                writer.writerow(["" if row.get(k) is None else row.get(k, "")
                                 for k in keys])


def hyperparameter_sweep(base_spec: ModelSpec, base_config: TrainConfig, settings: list[dict],
                         seeds, train_set, val_set, test_set=None,
                         metric: str = "val_loss", workers: int = 1) -> SweepResult:
    """Train every (setting, seed) cell and rank settings by mean validation metric.

    ``metric`` is ``"val_loss"`` (lower is better) or ``"val_accuracy"``
    (higher is better).  Cell failures are recorded in their row and excluded
    from the means.  Results are merged in (setting, seed) order regardless
    of worker scheduling.
    """
    if not settings or not len(list(seeds)):
        raise ValueError("sweep needs at least one setting and one seed")
    if metric not in ("val_loss", "val_accuracy"):
        raise ValueError(f"unknown sweep metric {metric!r}")
    seeds = list(seeds)
    jobs = [(i, setting, seed, base_spec, base_config, train_set, val_set, test_set)
            for i, setting in enumerate(settings) for seed in seeds]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs, chunksize=1))
    else:
        rows = [_sweep_cell(job) for job in jobs]
    rows.sort(key=lambda r: (r["setting_index"], r["seed"]))

    higher_better = metric == "val_accuracy"
    key = "val_metric" if higher_better else "val_loss"
    means = []
    for i in range(len(settings)):
        vals = [r[key] for r in rows
                if r["setting_index"] == i and r["error"] is None and not math.isnan(r[key])]
        means.append(float(np.mean(vals)) if vals else math.nan)
    ranked = [(m if not math.isnan(m) else (-math.inf if higher_better else math.inf), i)
              for i, m in enumerate(means)]
    winner = max(ranked)[1] if higher_better else min(ranked)[1]
    return SweepResult(rows=rows, setting_means=means, winner_index=winner, metric=metric)
