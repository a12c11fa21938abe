"""Training, evaluation and the seed/model experiment matrix.

The model loss is the mean squared error between the output tree tensor and
the encoded target; the reported metric is exact match after a symbolic
decode.  DTM/DTE read the tree after the last step, TDTE the tree at its
learned termination step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .checkpoint import load_checkpoint, save_checkpoint
from .controller import DTMController, MoEController
from .errors import CheckpointError, ConfigError, DecodeError, NumericError
from .machine import MachineOps, init_state, execute_step
from .symbolic import Tree
from .tasks import SamplePair, read_dataset, vocab_hash
from .termination import TermState, needed_steps, termination_losses, terminated_step
from .tpr import FillerTable, RoleBasis, build_filler_table, build_operators, build_role_basis, encode_tree

log = logging.getLogger(__name__)

MODEL_KINDS = ("dtm", "dte", "tdte", "sparse_dte", "sparse_tdte")
FILLER_SEED = 0


@dataclass
class TrainConfig:
    model_kind: str = "dte"
    task_path: str = ""
    d_model: int | None = None          # None: 64, or 256 for the termination variants
    n_experts: int = 16
    top_k: int | None = None            # None: dense, or 4 for the sparse variants
    n_heads: int = 4
    max_steps: int | None = None        # None: 12, or 28 for the termination variants
    filler_dim: int = 32
    batch_size: int = 16
    epochs: int = 200
    lr: float = 1e-3
    clip_norm: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    exclusion_threshold: float = 0.90
    train_limit: int | None = None      # use only the first N training samples
    eval_limit: int | None = None       # cap samples per evaluated split
    target_val_acc: float | None = None  # stop once validation reaches this
    patience: int = 1                   # ... for this many consecutive epochs
    max_minutes: float | None = None    # wall-clock budget; training stops after the current epoch
    term_scale: float = 10.0
    term_threshold: float = 0.8
    term_discount: float = 0.9
    residual_weight: float = 0.1

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model_kind {self.model_kind!r}; expected one of {MODEL_KINDS}")
        if self.d_model is None:
            self.d_model = 256 if self.terminating else 64
        if self.max_steps is None:
            self.max_steps = 28 if self.terminating else 12
        if self.top_k is None and self.model_kind.startswith("sparse"):
            self.top_k = 4
        if self.model_kind == "dtm" and self.top_k is not None:
            raise ConfigError("top_k applies to the expert models only")
        if self.top_k is not None and not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} outside 1..{self.n_experts}")
        for name in ("d_model", "n_experts", "n_heads", "max_steps", "filler_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def terminating(self) -> bool:
        return self.model_kind in ("tdte", "sparse_tdte")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    seed: int
    model_kind: str
    param_count: int
    epochs: list[dict] = field(default_factory=list)
    split_acc: dict[str, float] = field(default_factory=dict)
    best_val_acc: float = 0.0
    excluded: bool = True
    terminated_step: int | None = None
    stop_reason: str = "epochs"
    train_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    def metrics(self) -> dict:
        """The deterministic part of the report (no wall-clock times)."""
        d = self.to_dict()
        d.pop("train_seconds")
        d["epochs"] = [{k: v for k, v in e.items() if k != "seconds"} for e in d["epochs"]]
        return d


# ---------------------------------------------------------------------------
# model assembly

@dataclass
class Model:
    config: TrainConfig
    basis: RoleBasis
    fillers: FillerTable
    ops: MachineOps
    controller: MoEController | DTMController
    term: TermState | None = None

    def parameters(self) -> list[dm.Tensor]:
        params = self.controller.parameters()
        if self.term is not None:
            params += self.term.parameters()
        return params

    def num_parameters(self) -> int:
        """Size of the controller network.  The two termination predictors
        (one constant per step each) are counted separately."""
        return self.controller.num_parameters()

    def num_term_parameters(self) -> int:
        return 0 if self.term is None else sum(p.data.size for p in self.term.parameters())

    def output_step(self) -> int:
        return terminated_step(self.term) if self.term is not None else self.config.max_steps

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.controller.state_dict()
        if self.term is not None:
            out["term.damper.raw"] = self.term.damper.raw.data.copy()
            out["term.explorer.raw"] = self.term.explorer.raw.data.copy()
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        arrays = dict(arrays)
        if self.term is not None:
            for name, pred in (("term.damper.raw", self.term.damper), ("term.explorer.raw", self.term.explorer)):
                if name not in arrays:
                    raise CheckpointError(f"missing {name}")
                if arrays[name].shape != pred.raw.shape:
                    raise CheckpointError(f"{name}: shape {arrays[name].shape}, expected {pred.raw.shape}")
                pred.raw.data[...] = arrays.pop(name)
        self.controller.load_state_dict(arrays)


def build_model(config: TrainConfig, vocab: Sequence[str], max_depth: int, rng: np.random.Generator) -> Model:
    basis = build_role_basis(max_depth)
    fillers = build_filler_table(vocab, config.filler_dim, seed=FILLER_SEED)
    ops = MachineOps(build_operators(basis))
    kw = dict(filler_dim=config.filler_dim, num_roles=basis.num_roles, d_model=config.d_model,
              n_heads=config.n_heads)
    if config.model_kind == "dtm":
        controller = DTMController.init(rng, max_steps=config.max_steps, **kw)
    else:
        controller = MoEController.init(rng, n_experts=config.n_experts, top_k=config.top_k, **kw)
    term = None
    if config.terminating:
        term = TermState.init(config.max_steps, rng, scale=config.term_scale,
                              confidence_threshold=config.term_threshold, discount=config.term_discount,
                              residual_weight=config.residual_weight)
    return Model(config, basis, fillers, ops, controller, term)


def count_parameters(config: TrainConfig, vocab_size: int = 64, max_depth: int = 6) -> int:
    """Parameter count of a freshly built model (weights are irrelevant)."""
    return build_model(config, [f"w{i}" for i in range(vocab_size)], max_depth,
                       np.random.default_rng(0)).num_parameters()


# ---------------------------------------------------------------------------
# forward passes

def encode_batch(trees: Sequence[Tree], model: Model) -> np.ndarray:
    return np.stack([encode_tree(t, model.basis, model.fillers) for t in trees])


def run_steps(model: Model, sources: np.ndarray, n_steps: int):
    state = init_state(dm.Tensor(sources))
    for step in range(n_steps):
        state = execute_step(state, model.controller.decide(state, step), model.ops)
    return state


def model_loss(final_tree, target) -> dm.Tensor:
    """MSE between the output tree tensor and the encoded target."""
    return dm.mse_loss(final_tree, target)


def predict(model: Model, sources: Sequence[Tree], batch_size: int = 64) -> list[np.ndarray]:
    """Output tree tensors (no tape is active, so nothing is recorded)."""
    step = model.output_step()
    out = []
    for i in range(0, len(sources), batch_size):
        state = run_steps(model, encode_batch(sources[i:i + batch_size], model), step)
        out.extend(state.trees[step].data)
    return out


def decode_or_none(tensor: np.ndarray, model: Model) -> Tree | None:
    try:
        return model_decode(tensor, model)
    except DecodeError:
        return None


def model_decode(tensor: np.ndarray, model: Model) -> Tree:
    from .tpr import decode_tree
    return decode_tree(tensor, model.basis, model.fillers)


def accuracy(model: Model, pairs: Sequence[SamplePair], batch_size: int = 64) -> float:
    """Exact-match accuracy; undecodable outputs count as wrong."""
    if not pairs:
        return float("nan")
    outputs = predict(model, [p.source for p in pairs], batch_size)
    hits = sum(decode_or_none(t, model) == p.target for t, p in zip(outputs, pairs))
    return hits / len(pairs)


# ---------------------------------------------------------------------------
# training

@dataclass
class Dataset:
    splits: dict[str, list[SamplePair]]
    vocab: list[str]
    max_depth: int
    manifest: dict


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    splits = {}
    for split in manifest["counts"]:
        f = path / f"{split}.jsonl"
        splits[split] = read_dataset(f) if f.exists() else []
    return Dataset(splits, list(manifest["vocab"]), int(manifest["max_depth"]), manifest)


def dataset_from_pairs(pairs: Sequence[SamplePair], spec) -> Dataset:
    """In-memory dataset for a ``TaskSpec`` without touching the disk."""
    from .tasks import by_split, manifest

    splits = by_split(pairs)
    info = manifest(spec, {k: len(v) for k, v in splits.items()})
    return Dataset(splits, info["vocab"], info["max_depth"], info)


def split_validation(pairs: Sequence[SamplePair], fraction: float, seed: int):
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(pairs))
    n_val = max(1, int(round(fraction * len(pairs))))
    val = [pairs[i] for i in sorted(order[:n_val])]
    train = [pairs[i] for i in sorted(order[n_val:])]
    return train, val


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} is not finite ({value})")


def train_step(model: Model, src: np.ndarray, tgt: np.ndarray, opt: dm.Adam) -> dict:
    """One optimizer update; returns the logged quantities."""
    opt.zero_grad()
    with dm.Tape() as tape:
        if model.term is None:
            state = run_steps(model, src, model.config.max_steps)
            loss = model_loss(state.trees[-1], tgt)
            info = {"loss": loss.item()}
            total = loss
        else:
            term = model.term
            steps = needed_steps(term)
            state = run_steps(model, src, max(steps))
            losses = {s: model_loss(state.trees[s], tgt) for s in steps}
            # candidates are compared on squared error per tree: the per-entry
            # mean is ~1e-5 and the step penalty would swamp any difference
            per_tree = tgt[0].size
            tl = termination_losses(term, {s: l.item() * per_tree for s, l in losses.items()})
            total = losses[tl.main_step]
            for s in tl.residual_steps:
                total = dm.add(total, dm.scale(losses[s], term.residual_weight))
            total = dm.add(total, dm.add(tl.loss_damp, tl.loss_expl))
            info = {"loss": losses[tl.main_step].item(), "y_damp": tl.y_damp, "y_expl": tl.y_expl}
        _check_finite(total.item(), "training loss")
        tape.backward(total)
    opt.step()
    return info


def train(config: TrainConfig, dataset: Dataset | None = None, out_dir=None,
          progress=None) -> tuple[RunReport, Model]:
    """Seeded training run.  Writes checkpoint, metrics.csv and summary.json
    into ``out_dir`` when given."""
    if dataset is None:
        if not config.task_path:
            raise ConfigError("train: no dataset and no task_path")
        dataset = load_dataset(config.task_path)
    rng = np.random.default_rng(config.seed)
    model = build_model(config, dataset.vocab, dataset.max_depth, rng)
    train_pairs = dataset.splits.get("train", [])
    if config.train_limit:
        train_pairs = train_pairs[:config.train_limit]
    if len(train_pairs) < 2:
        raise ConfigError("training split needs at least 2 samples")
    train_pairs, val_pairs = split_validation(train_pairs, config.val_fraction, config.seed)
    if config.eval_limit:
        val_pairs = val_pairs[:config.eval_limit]

    src_all = encode_batch([p.source for p in train_pairs], model)
    tgt_all = encode_batch([p.target for p in train_pairs], model)
    opt = dm.Adam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    report = RunReport(config.seed, config.model_kind, model.num_parameters())
    shuffle_rng = np.random.default_rng([config.seed, 1])
    start = time.perf_counter()
    streak = 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_pairs))
        batch_losses = []
        changes = 0                     # updates that moved the terminated step
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            before = model.term.i_damp if model.term is not None else None
            info = train_step(model, src_all[idx], tgt_all[idx], opt)
            batch_losses.append(info["loss"])
            if model.term is not None and model.term.i_damp != before:
                changes += 1
        val_acc = accuracy(model, val_pairs)
        row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_acc": val_acc,
               "seconds": round(time.perf_counter() - t0, 3)}
        if model.term is not None:
            row.update(model.term.trace())
            row["i_damp_changes"] = changes
        report.epochs.append(row)
        report.best_val_acc = max(report.best_val_acc, val_acc)
        if progress is not None:
            progress(row)
        log.info("epoch %d loss %.6f val %.4f", epoch, row["train_loss"], val_acc)

        streak = streak + 1 if config.target_val_acc is not None and val_acc >= config.target_val_acc else 0
        if config.target_val_acc is not None and streak >= config.patience:
            report.stop_reason = "target"
            break
        if config.max_minutes is not None and time.perf_counter() - start > 60 * config.max_minutes:
            report.stop_reason = "time"
            break

    report.train_seconds = round(time.perf_counter() - start, 3)
    report.excluded = report.best_val_acc < config.exclusion_threshold
    if model.term is not None:
        report.terminated_step = terminated_step(model.term)
    for split, pairs in dataset.splits.items():
        if split == "train":
            pairs = train_pairs
        if config.eval_limit:
            pairs = pairs[:config.eval_limit]
        report.split_acc[split] = accuracy(model, pairs)
    if out_dir is not None:
        write_run(out_dir, config, report, model, dataset)
    return report, model


# ---------------------------------------------------------------------------
# persistence and evaluation

def write_run(out_dir, config: TrainConfig, report: RunReport, model: Model, dataset: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": config.to_dict(), "vocab": dataset.vocab, "vocab_hash": vocab_hash(dataset.vocab),
            "max_depth": dataset.max_depth, "filler_seed": FILLER_SEED}
    save_checkpoint(out / "checkpoint.bin", model.state_dict(), meta)
    write_metrics_csv(out / "metrics.csv", report.epochs)
    (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_metrics_csv(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys or ["epoch"])
        writer.writeheader()
        writer.writerows(rows)


def load_model(checkpoint_path) -> Model:
    params, meta = load_checkpoint(checkpoint_path)
    try:
        config = TrainConfig.from_dict(meta["config"])
        vocab, max_depth = meta["vocab"], int(meta["max_depth"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint metadata is incomplete: {exc}") from exc
    model = build_model(config, vocab, max_depth, np.random.default_rng(0))
    model.load_state_dict(params)
    return model


def evaluate(checkpoint_path, dataset: Dataset, split: str, limit: int | None = None) -> float:
    model = load_model(checkpoint_path)
    _, meta = load_checkpoint(checkpoint_path)
    if meta.get("vocab_hash") != vocab_hash(dataset.vocab) or int(meta["max_depth"]) != dataset.max_depth:
        raise CheckpointError("checkpoint was trained on a different vocabulary or role basis")
    if split not in dataset.splits:
        raise ConfigError(f"dataset has no split {split!r}; available: {sorted(dataset.splits)}")
    pairs = dataset.splits[split]
    return accuracy(model, pairs[:limit] if limit else pairs)


# ---------------------------------------------------------------------------
# experiment matrix

AGG_COLUMNS = ["task", "model", "split", "mean", "std", "n_included", "n_runs", "param_count"]
TABLE_SPLITS = ("train", "test_id", "test_ood_lexical", "test_ood_structural")


def aggregate(reports: Sequence[RunReport], task: str) -> list[dict]:
    """Mean/std per (model, split) over non-excluded runs.  A model whose
    runs are all excluded still gets rows, with empty statistics."""
    rows = []
    by_model: dict[str, list[RunReport]] = {}
    for r in reports:
        by_model.setdefault(r.model_kind, []).append(r)
    for model_kind, runs in by_model.items():
        kept = [r for r in runs if not r.excluded]
        for split in TABLE_SPLITS:
            vals = [r.split_acc[split] for r in kept if split in r.split_acc]
            rows.append({"task": task, "model": model_kind, "split": split,
                         "mean": float(np.mean(vals)) if vals else "",
                         "std": float(np.std(vals)) if vals else "",
                         "n_included": len(vals), "n_runs": len(runs),
                         "param_count": runs[0].param_count})
    return rows


def write_aggregate_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def experiment_matrix(configs: Sequence[TrainConfig], n_seeds: int, dataset: Dataset | None = None,
                      out_dir=None, task: str | None = None) -> list[dict]:
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    reports = []
    for config in configs:
        for seed in range(n_seeds):
            cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
            run_dir = None if out_dir is None else Path(out_dir) / f"{cfg.model_kind}_seed{seed}"
            report, _ = train(cfg, dataset, run_dir)
            reports.append(report)
    if task is None:
        task = dataset.manifest.get("task_kind", "") if dataset is not None else ""
    rows = aggregate(reports, task)
    if out_dir is not None:
        write_aggregate_csv(Path(out_dir) / "aggregate.csv", rows)
    return rows


def steps_vs_params(model_kinds: Sequence[str] = ("dtm", "dte", "tdte"), steps=(12, 28, 56),
                    d_model: int = 64, vocab_size: int = 64, max_depth: int = 6) -> list[dict]:
    rows = []
    for kind in model_kinds:
        for s in steps:
            cfg = TrainConfig(model_kind=kind, max_steps=s, d_model=d_model)
            rows.append({"model": kind, "max_steps": s,
                         "param_count": count_parameters(cfg, vocab_size, max_depth)})
    return rows
