"""Adam, the seeded training loop and checkpoint files.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"FSRFCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: arrays [{name, shape, offset, count}],
              payload sha256, model config, metadata
    ...       float64 payload, arrays concatenated in header order

Array names are prefixed ``param/``, ``adam_m/``, ``adam_v/`` and ``best/``.
The JSON is written with sorted keys and no timestamps, so identical runs
produce identical bytes.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalDomainError
from .data import MODALITIES, Dataset, mask_batch, draw_mrm_pair
from .distill import BREAKDOWN_KEYS, VARIANTS, BranchInput, das_loss, mrm_branches
from .encoders import FSRFModel, ModelConfig
from .evaluation import eval_inter_grid
from .losses import LossConfig

log = logging.getLogger(__name__)

MAGIC = b"FSRFCKPT"
FORMAT_VERSION = 1
TRACE_COLUMNS = ("epoch", "batch") + BREAKDOWN_KEYS


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, breakdown: dict | None = None):
        super().__init__(message)
        self.breakdown = breakdown or {}


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params`` (name -> array).

    Missing gradients count as zero. A non-finite gradient aborts the step
    before anything is modified.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalDomainError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "classification"
    variant: str = "full"
    d_u: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    mrm_resample_each_epoch: bool = True
    split: tuple = (0.6, 0.2, 0.2)
    split_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.split = tuple(self.split)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.learning_rate <= 0 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("need learning_rate > 0, batch_size >= 2, epochs >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw)

    def model_config(self, dims: dict) -> ModelConfig:
        return ModelConfig(
            dims=dims, d_u=self.d_u, n_layers=self.n_layers, n_heads=self.n_heads,
            ff_mult=self.ff_mult, mode=self.mode,
            variant="no_dhf" if self.variant == "no_dhf" else "full", seed=self.seed,
        )

    def effective_loss(self) -> LossConfig:
        """Loss weights after applying the ablation variant."""
        cfg = copy.deepcopy(self.loss)
        if self.variant == "no_dhf":
            cfg.lambda1 = 0.0
        elif self.variant == "no_das":
            cfg.lambda2 = 0.0
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def task_targets(dataset: Dataset, mode: str) -> np.ndarray:
    labels = dataset.arrays()[2]
    if mode == "classification":
        return dataset.binary_labels().astype(np.float64)
    if dataset.label_kind != "regression":
        raise ValueError("regression mode needs a regression-labelled dataset")
    return labels


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: FSRFModel
    trace: list
    val_history: list
    best_epoch: int
    best_score: float
    final_model: FSRFModel | None = None


@dataclass
class _RunState:
    model: FSRFModel
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0
    trace: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_params: dict | None = None
    best_score: float = -1.0
    best_epoch: int = -1


def validation_score(model: FSRFModel, val: Dataset) -> float:
    """Mean F1 over the seven inter-modality conditions."""
    grid = eval_inter_grid(model, val)
    return float(np.mean(list(grid.values())))


def _fixed_views(train: Dataset, seed: int, two: bool):
    feats, masks, _ = train.arrays()
    rng = np.random.default_rng([seed, 7919])
    pairs = [draw_mrm_pair(rng) for _ in range(len(train))]
    vp = mask_batch(feats, masks, [p for p, _ in pairs], rng)
    vq = mask_batch(feats, masks, [q for _, q in pairs], rng) if two else None
    return vp, vq


def train(
    train_set: Dataset,
    val_set: Dataset | None,
    config: TrainConfig,
    checkpoint_dir=None,
    resume: bool = False,
    stop_at_epoch: int | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of MRM + self-distillation + Adam.

    With ``checkpoint_dir`` the full run state is saved to ``last.ckpt`` after
    every epoch and the best-validation parameters to ``best.ckpt``;
    ``resume=True`` continues from ``last.ckpt``. ``stop_at_epoch`` ends the
    call early once that many epochs are complete (used to test resumption).
    """
    if len(train_set) < 2:
        raise ValueError("training set needs at least 2 samples")
    loss_cfg = config.effective_loss()
    two = config.variant != "no_das"
    targets_all = task_targets(train_set, config.mode)
    feats_all, masks_all, _ = train_set.arrays()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    if resume:
        if ckpt_dir is None:
            raise ValueError("resume needs a checkpoint_dir")
        state = _load_run_state(ckpt_dir / "last.ckpt", config)
    else:
        model = FSRFModel(config.model_config(train_set.dims))
        state = _RunState(model, OptimizerState(), np.random.default_rng(config.seed))

    fixed = None if config.mrm_resample_each_epoch else _fixed_views(train_set, config.seed, two)
    params = {k: t.data for k, t in state.model.params.items()}
    n = len(train_set)
    bs = config.batch_size

    while state.epoch < config.epochs:
        epoch = state.epoch
        order = state.rng.permutation(n)
        for b, lo in enumerate(range(0, n, bs)):
            idx = np.sort(order[lo:lo + bs])
            if len(idx) < 2:
                continue
            targets = targets_all[idx]
            if fixed is None:
                feats = {m: feats_all[m][idx] for m in MODALITIES}
                masks = {m: masks_all[m][idx] for m in MODALITIES}
                bp, bq, _, _ = mrm_branches(feats, masks, state.rng, two_branches=two)
            else:
                (fp, kp), vq = fixed
                bp = BranchInput({m: fp[m][idx] for m in MODALITIES}, {m: kp[m][idx] for m in MODALITIES})
                bq = None if vq is None else BranchInput(
                    {m: vq[0][m][idx] for m in MODALITIES}, {m: vq[1][m][idx] for m in MODALITIES})
            breakdown = None
            try:
                with ad.Tape() as tape:
                    total, breakdown = das_loss(state.model, bp, bq, targets, loss_cfg)
                grads = tape.backward(total, accumulate=False)
                named = {t.name: g for t, g in grads.items()}
                adam_step(params, named, state.opt, config.learning_rate,
                          config.beta1, config.beta2, config.adam_eps)
            except NumericalDomainError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch} batch {b}: {exc}", breakdown) from exc
            state.trace.append({"epoch": epoch, "batch": b, **breakdown})

        if val_set is not None and len(val_set):
            score = validation_score(state.model, val_set)
        else:
            score = -float(np.mean([r["total"] for r in state.trace if r["epoch"] == epoch]))
        state.val_history.append(score)
        if score > state.best_score:
            state.best_score = score
            state.best_epoch = epoch
            state.best_params = {k: v.copy() for k, v in params.items()}
        log.info("epoch %d: total=%.4f val=%.4f", epoch,
                 np.mean([r["total"] for r in state.trace if r["epoch"] == epoch]), score)
        state.epoch += 1
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "last.ckpt", state.model, state.opt, _run_meta(state, config),
                            best=state.best_params)
            save_checkpoint(ckpt_dir / "best.ckpt", _with_params(state.model, state.best_params),
                            None, {"best_epoch": state.best_epoch, "best_score": state.best_score,
                                   "train_config": config.to_dict()})
        if stop_at_epoch is not None and state.epoch >= stop_at_epoch:
            break

    best = _with_params(state.model, state.best_params)
    return TrainResult(best, state.trace, state.val_history, state.best_epoch, state.best_score,
                       final_model=state.model)


def _with_params(model: FSRFModel, arrays: dict | None) -> FSRFModel:
    if arrays is None:
        return model.copy()
    return FSRFModel(model.config, {k: ad.Tensor(v.copy(), requires_grad=True, name=k)
                                    for k, v in arrays.items()})


def _run_meta(state: _RunState, config: TrainConfig) -> dict:
    return {
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "opt_step": state.opt.step,
        "best_score": state.best_score,
        "best_epoch": state.best_epoch,
        "trace": state.trace,
        "val_history": state.val_history,
        "train_config": config.to_dict(),
    }


def _load_run_state(path, config: TrainConfig) -> _RunState:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    rng = np.random.default_rng()
    state = meta["rng_state"]
    rng.bit_generator.state = state
    opt = ckpt.optimizer or OptimizerState()
    return _RunState(
        ckpt.model, opt, rng, epoch=meta["epoch"], trace=meta["trace"],
        val_history=meta["val_history"], best_params=ckpt.best,
        best_score=meta["best_score"], best_epoch=meta["best_epoch"],
    )


def write_trace(trace: list, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["epoch"], row["batch"]] + [repr(float(row[k])) for k in BREAKDOWN_KEYS])
    return path


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: FSRFModel
    optimizer: OptimizerState | None
    meta: dict
    best: dict | None


def save_checkpoint(path, model: FSRFModel, optimizer: OptimizerState | None = None,
                    meta: dict | None = None, best: dict | None = None) -> Path:
    arrays: list[tuple[str, np.ndarray]] = []
    names = sorted(model.params)
    arrays += [(f"param/{k}", model.params[k].data) for k in names]
    if optimizer is not None:
        arrays += [(f"adam_m/{k}", optimizer.m[k]) for k in names if k in optimizer.m]
        arrays += [(f"adam_v/{k}", optimizer.v[k]) for k in names if k in optimizer.v]
    if best is not None:
        arrays += [(f"best/{k}", best[k]) for k in names]

    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "model_config": model.config.to_dict(),
        "optimizer_step": None if optimizer is None else optimizer.step,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(raw) < fixed or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", raw[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < fixed + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[fixed:fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[fixed + head_len:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    values = np.frombuffer(payload, dtype="<f8")

    groups: dict[str, dict[str, np.ndarray]] = {}
    for e in header["arrays"]:
        kind, name = e["name"].split("/", 1)
        arr = values[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        groups.setdefault(kind, {})[name] = arr

    cfg_raw = header["model_config"]
    cfg = ModelConfig(**cfg_raw)
    model = FSRFModel(cfg, {k: ad.Tensor(v, requires_grad=True, name=k)
                            for k, v in groups.get("param", {}).items()})
    optimizer = None
    if header.get("optimizer_step") is not None:
        optimizer = OptimizerState(groups.get("adam_m", {}), groups.get("adam_v", {}),
                                   int(header["optimizer_step"]))
    return Checkpoint(model, optimizer, header.get("meta", {}), groups.get("best"))
