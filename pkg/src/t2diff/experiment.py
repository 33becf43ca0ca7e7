"""Training, exact top-K evaluation, baselines, timing and ablation grids."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import TrainConfig
from .data import BehaviorSequence, DatasetSplit
from .diffusion import NoiseSchedule
from .model import Batch, T2Diff, encode, per_user_noise
from .numerics import kernels
from .numerics.checkpoint import load_params, save_params
from .numerics.optim import Adam
from .numerics.rng import stream

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.t2pw"
CONFIG = "config.txt"


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"diverged at step {step}: {what} is not finite")
        self.step = step


# ---------------------------------------------------------------- metrics
def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int]) -> tuple[dict[int, float], dict[int, float]]:
    """Recall@K and MRR@K from 1-based target ranks."""
    ranks = np.asarray(ranks, dtype=np.int64)
    recall, mrr = {}, {}
    for k in sorted(set(int(k) for k in ks)):
        hit = ranks <= k
        recall[k] = float(hit.mean()) if len(ranks) else 0.0
        mrr[k] = float(np.where(hit, 1.0 / ranks, 0.0).mean()) if len(ranks) else 0.0
    return recall, mrr


def rank_targets(scores: np.ndarray, targets: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Ranks of item ids ``targets`` (1-based ids) among score columns ``0..M-1`` = items ``1..M``."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    return kernels.target_ranks(scores, np.asarray(targets, dtype=np.int64) - 1, exclude)


def seen_mask(examples: Sequence[BehaviorSequence], item_count: int) -> np.ndarray:
    """Candidates already in each example's behavior sequence, target excluded."""
    mask = np.zeros((len(examples), item_count), dtype=bool)
    for i, s in enumerate(examples):
        mask[i, s.sequence - 1] = True
        mask[i, s.target - 1] = False
    return mask


@dataclass
class EvalReport:
    recall: dict[int, float]
    mrr: dict[int, float]
    users: int
    infer_ms: float = float("nan")
    n_params: int = 0
    trace_path: str = ""
    config: dict = field(default_factory=dict)
    label: str = ""

    def to_json(self) -> str:
        doc = asdict(self)
        doc["recall"] = {str(k): v for k, v in self.recall.items()}
        doc["mrr"] = {str(k): v for k, v in self.mrr.items()}
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)

    def rows(self) -> list[tuple[str, str, int, float]]:
        label = self.label or self.config.get("variant", "")
        out = []
        for k in sorted(self.recall):
            out.append((label, "recall", k, self.recall[k]))
            out.append((label, "mrr", k, self.mrr[k]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "metric", "k", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'K':>5} {'Recall@K':>10} {'MRR@K':>10}"]
        for k in sorted(self.recall):
            lines.append(f"{k:>5} {self.recall[k]:>10.5f} {self.mrr[k]:>10.5f}")
        return "\n".join(lines)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------- model I/O
def build_model(config: TrainConfig, item_count: int) -> T2Diff:
    return T2Diff(item_count, config.d, config.k_max, stream(config.seed, "init"),
                  variant=config.variant, heads=config.heads, layers=config.layers)


def save_run_checkpoint(model: T2Diff, config: TrainConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / CHECKPOINT, model.state_dict())
    (directory / CONFIG).write_text(config.to_text())
    return directory / CHECKPOINT


def load_run_checkpoint(path, item_count: int) -> tuple[T2Diff, TrainConfig]:
    """Checkpoint plus the ``config.txt`` written next to it."""
    from .config import load_config

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = load_params(path)
    config = load_config(path.parent / CONFIG, env={})
    model = build_model(config, item_count)
    model.load_state_dict(state)
    return model, config


# ---------------------------------------------------------------- evaluation
def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def score_users(model: T2Diff, examples: Sequence[BehaviorSequence], config: TrainConfig,
                schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """User embeddings ``(U, d)``; each user's reverse loop has its own stream."""
    out = np.zeros((len(examples), model.d), dtype=np.float64)
    for sl in _batches(len(examples), config.eval_batch):
        batch = encode(examples[sl], config.max_len)
        noise = per_user_noise(seed, batch.user, batch.items.shape[1:] + (model.d,),
                               dtype=model.items.weight.dtype)
        out[sl] = model.user_embeddings(batch, schedule, noise)
    return out


def evaluate(model: T2Diff, examples: Sequence[BehaviorSequence], config: TrainConfig,
             ks: Sequence[int] = (20,), seed: int = 0, filter_seen: bool | None = None,
             schedule: NoiseSchedule | None = None, label: str = "") -> EvalReport:
    """Exact inner-product ranking over the whole vocabulary."""
    schedule = schedule or config.noise_schedule()
    filter_seen = config.filter_seen if filter_seen is None else filter_seen
    ranks = np.zeros(len(examples), dtype=np.int64)
    table = model.item_matrix().astype(np.float64)
    emb = score_users(model, examples, config, schedule, seed)
    for sl in _batches(len(examples), config.eval_batch):
        scores = emb[sl] @ table.T
        targets = np.array([s.target for s in examples[sl]], dtype=np.int64)
        exclude = seen_mask(examples[sl], model.item_count) if filter_seen else None
        ranks[sl] = rank_targets(scores, targets, exclude)
    recall, mrr = metrics_from_ranks(ranks, ks)
    return EvalReport(recall, mrr, len(examples), n_params=model.num_parameters(),
                      config=asdict(config), label=label)


def popularity_baseline(split: DatasetSplit, examples: Sequence[BehaviorSequence] | None = None,
                        ks: Sequence[int] = (20,), filter_seen: bool = False) -> EvalReport:
    """Rank every item by how often it occurs in the training portion."""
    examples = split.test if examples is None else examples
    counts = np.zeros(split.item_count, dtype=np.float64)
    # a validation example's behavior sequence is exactly the user's training items
    for s in split.validation:
        np.add.at(counts, s.sequence - 1, 1.0)
    scores = np.broadcast_to(counts, (len(examples), split.item_count))
    targets = np.array([s.target for s in examples], dtype=np.int64)
    exclude = seen_mask(examples, split.item_count) if filter_seen else None
    ranks = rank_targets(scores, targets, exclude)
    recall, mrr = metrics_from_ranks(ranks, ks)
    return EvalReport(recall, mrr, len(examples), label="popularity")


def time_inference(model: T2Diff, examples: Sequence[BehaviorSequence], config: TrainConfig,
                   schedule: NoiseSchedule | None = None, users: int = 1000, warmup: int = 5,
                   seed: int = 0) -> float:
    """Median wall-clock milliseconds per user, one user at a time, reverse loop included."""
    schedule = schedule or config.noise_schedule()
    if not examples:
        raise ValueError("time_inference needs at least one example")
    picks = [examples[i % len(examples)] for i in range(users)]
    table = model.item_matrix()
    dtype = model.items.weight.dtype

    def one(ex):
        batch = encode([ex], config.max_len)
        noise = per_user_noise(seed, batch.user, batch.items.shape[1:] + (model.d,), dtype=dtype)
        e_u = model.user_embeddings(batch, schedule, noise)
        return e_u @ table.T

    for ex in picks[:warmup]:
        one(ex)
    times = np.empty(len(picks))
    for i, ex in enumerate(picks):
        t0 = time.perf_counter()
        one(ex)
        times[i] = time.perf_counter() - t0
    return float(np.median(times) * 1e3)


# ---------------------------------------------------------------- training
@dataclass
class TrainResult:
    model: T2Diff
    config: TrainConfig
    steps: list[tuple[int, int, float, float, float, float]]  # step, epoch, l_tower, l_kl, l_total, cos
    val_recall: list[float]
    best_epoch: int
    run_dir: Path | None = None

    @property
    def similarity(self) -> np.ndarray:
        return np.array([r[5] for r in self.steps])


def _encode_all(examples: Sequence[BehaviorSequence], max_len: int) -> Batch:
    return encode(examples, max_len)


def train(split: DatasetSplit, config: TrainConfig, out_dir=None, max_steps: int | None = None,
          val_examples: Sequence[BehaviorSequence] | None = None) -> TrainResult:
    """Adam on ``L_tower + lam * L_kl`` with early stopping on validation recall.

    Every random draw comes from a stream keyed by the seed plus
    ``(epoch, batch, purpose)``, so a rerun is bit-identical.  ``max_steps``
    caps the total number of updates (useful for smoke runs).
    """
    if not split.train:
        raise ValueError("split has no training examples")
    model = build_model(config, split.item_count)
    schedule = config.noise_schedule()
    opt = Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    data = _encode_all(split.train, config.max_len)
    val = split.validation if val_examples is None else val_examples
    steps: list[tuple] = []
    val_recall: list[float] = []
    best, best_epoch, best_state, bad = -1.0, -1, None, 0
    step = 0
    for epoch in range(config.epochs):
        order = stream(config.seed, "shuffle", epoch).permutation(len(data))
        for bi, sl in enumerate(_batches(len(order), config.batch_size)):
            batch = data.take(order[sl])
            rng = stream(config.seed, "train", epoch, bi)
            negatives = None
            if config.negatives:
                negatives = rng.integers(1, split.item_count + 1, size=config.negatives)
            opt.zero_grad()
            losses, sim = model.forward_train(batch, rng, schedule, config.lam, negatives)
            for name in ("l_tower", "l_kl", "l_total"):
                value = getattr(losses, name)
                if value is not None and not np.isfinite(value.data).all():
                    raise DivergenceError(step, name)
            losses.l_total.backward()
            opt.step()
            l_kl = float(losses.l_kl.data) if losses.l_kl is not None else float("nan")
            steps.append((step, epoch, float(losses.l_tower.data), l_kl, float(losses.l_total.data), sim))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        if val:
            r = evaluate(model, val, config, ks=(config.eval_k,), seed=config.seed).recall[config.eval_k]
        else:
            r = float("nan")
        val_recall.append(r)
        log.info("epoch %d: val recall@%d = %.5f", epoch, config.eval_k, r)
        if not val or r > best:
            best, best_epoch, bad = r, epoch, 0
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            bad += 1
        if bad >= config.patience or (max_steps is not None and step >= max_steps):
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    result = TrainResult(model, config, steps, val_recall, best_epoch)
    if out_dir is not None:
        result.run_dir = write_run(result, out_dir)
    return result


def write_traces(result: TrainResult, directory: Path) -> tuple[Path, Path]:
    loss_path, sim_path = directory / "loss_trace.csv", directory / "similarity_trace.csv"
    with loss_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "l_tower", "l_kl", "l_total"])
        w.writerows((s, e, repr(a), repr(b), repr(c)) for s, e, a, b, c, _ in result.steps)
    with sim_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "cosine"])
        w.writerows((s, repr(c)) for s, *_, c in result.steps)
    return loss_path, sim_path


def write_run(result: TrainResult, out_dir, data_digest: str = "") -> Path:
    """Checkpoint, config, traces and manifest under ``out_dir/<config hash>``."""
    directory = Path(out_dir) / result.config.digest()
    ckpt = save_run_checkpoint(result.model, result.config, directory)
    loss_path, sim_path = write_traces(result, directory)
    names = [n for n, _ in result.model.named_parameters()]
    manifest = {
        "config_hash": result.config.digest(),
        "data_digest": data_digest,
        "version": __version__,
        "variant": result.config.variant,
        "n_params": result.model.num_parameters(),
        "unet_params": sum(p.size for n, p in result.model.named_parameters() if n.startswith("unet.")),
        "parameters": names,
        "best_epoch": result.best_epoch,
        "val_recall": result.val_recall,
        "outputs": {"checkpoint": ckpt.name, "config": CONFIG, "loss_trace": loss_path.name,
                    "similarity_trace": sim_path.name},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def fit_drift(X: np.ndarray, seed: int = 0, epochs: int = 5, batch_size: int = 64, lr: float = 1e-3,
              schedule: NoiseSchedule | None = None, use_drift: bool = True) -> tuple[object, np.ndarray]:
    """Train a lone U-Net on ``(count, n + 1, d)`` sequences; returns it and the cosine trace.

    Each iteration records the mean per-sample cosine between the true drift
    and the one-shot reconstruction; undefined values are kept as ``nan``.
    """
    from .diffusion import UNet1D, build_schedule, train_step, batch_similarity
    from .numerics.tensor import Tensor

    X = np.asarray(X, dtype=np.float32)
    schedule = schedule or build_schedule()
    unet = UNet1D(X.shape[-1], stream(seed, "init"))
    opt = Adam(unet.parameters(), lr=lr)
    trace = []
    for epoch in range(epochs):
        order = stream(seed, "shuffle", epoch).permutation(len(X))
        for bi, sl in enumerate(_batches(len(X), batch_size)):
            b = X[order[sl]]
            opt.zero_grad()
            res = train_step(Tensor(b[:, :-1]), Tensor(b[:, -1]), stream(seed, "train", epoch, bi),
                             schedule, unet, use_drift=use_drift)
            if not np.isfinite(res.loss.data):
                raise DivergenceError(len(trace), "l_kl")
            res.loss.backward()
            opt.step()
            trace.append(batch_similarity(res.z0.data, res.z0_hat.data))
    return unet, np.array(trace)


def bucket_means(trace: np.ndarray, buckets: int = 10) -> np.ndarray:
    """Mean of each of ``buckets`` equal consecutive chunks, ignoring ``nan``."""
    trace = np.asarray(trace, dtype=np.float64)
    edges = np.linspace(0, len(trace), buckets + 1).astype(int)
    out = np.full(buckets, np.nan)
    for i in range(buckets):
        chunk = trace[edges[i]:edges[i + 1]]
        chunk = chunk[~np.isnan(chunk)]
        if chunk.size:
            out[i] = chunk.mean()
    return out


# ---------------------------------------------------------------- ablations
AXES = {
    "variant": ("full", "no_drift_prep", "mixed_attention_only"),
    "schedule": ("exp", "linear", "log"),
    "steps": (10, 50, 200),
}


def axis_configs(base: TrainConfig, axis: str) -> list[tuple[str, TrainConfig]]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {tuple(AXES)}")
    if axis == "variant":
        return [(v, base.with_(variant=v)) for v in AXES[axis]]
    if axis == "schedule":
        return [(k, base.with_(schedule=k, variant="full")) for k in AXES[axis]]
    # b tracks T so beta_T stays at beta_last for every step count
    return [(f"T={t}", base.with_(T=t, b=None, variant="full")) for t in AXES[axis]]


@dataclass
class AblationRow:
    axis: str
    label: str
    seed: int
    recall: dict[int, float]
    mrr: dict[int, float]
    infer_ms: float
    n_params: int


def ablate(split: DatasetSplit, base: TrainConfig, axes: Sequence[str] = tuple(AXES),
           seeds: Sequence[int] = (0,), ks: Sequence[int] = (20,), out_dir=None,
           timing_users: int = 0, max_steps: int | None = None) -> dict[str, list[AblationRow]]:
    """Train and test every grid point of the requested axes for every seed."""
    tables: dict[str, list[AblationRow]] = {}
    cache: dict[str, AblationRow] = {}
    for axis in axes:
        rows = []
        for label, cfg in axis_configs(base, axis):
            for seed in seeds:
                run = cfg.with_(seed=seed)
                key = run.digest()
                if key not in cache:
                    res = train(split, run, out_dir=out_dir, max_steps=max_steps)
                    rep = evaluate(res.model, split.test, run, ks=ks, seed=seed)
                    ms = time_inference(res.model, split.test, run, users=timing_users) if timing_users else float("nan")
                    cache[key] = AblationRow(axis, label, seed, rep.recall, rep.mrr, ms, rep.n_params)
                    log.info("ablate %s=%s seed=%d: %s", axis, label, seed, rep.recall)
                row = cache[key]
                rows.append(AblationRow(axis, label, seed, row.recall, row.mrr, row.infer_ms, row.n_params))
        tables[axis] = rows
    return tables


def ablation_table(rows: Sequence[AblationRow]) -> str:
    """CSV with one row per (grid point, seed) plus a mean row per grid point."""
    ks = sorted(rows[0].recall) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "label", "seed"] + [f"recall@{k}" for k in ks] + [f"mrr@{k}" for k in ks]
               + ["infer_ms", "n_params"])
    labels = list(dict.fromkeys(r.label for r in rows))
    for r in rows:
        w.writerow([r.axis, r.label, r.seed] + [f"{r.recall[k]:.6f}" for k in ks]
                   + [f"{r.mrr[k]:.6f}" for k in ks] + [_fmt_ms(r.infer_ms), r.n_params])
    for lab in labels:
        group = [r for r in rows if r.label == lab]
        w.writerow([group[0].axis, lab, "mean"]
                   + [f"{np.mean([r.recall[k] for r in group]):.6f}" for k in ks]
                   + [f"{np.mean([r.mrr[k] for r in group]):.6f}" for k in ks]
                   + [_fmt_ms(float(np.mean([r.infer_ms for r in group]))), group[0].n_params])
    return buf.getvalue()


def _fmt_ms(ms: float) -> str:
    return "" if math.isnan(ms) else f"{ms:.4f}"


__all__ = [
    "DivergenceError", "EvalReport", "TrainResult", "AblationRow", "AXES",
    "metrics_from_ranks", "rank_targets", "seen_mask", "evaluate", "popularity_baseline",
    "time_inference", "train", "write_run", "build_model", "save_run_checkpoint",
    "load_run_checkpoint", "axis_configs", "ablate", "ablation_table", "score_users",
    "fit_drift", "bucket_means",
]
