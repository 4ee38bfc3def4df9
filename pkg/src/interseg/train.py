"""Adam, the step-decay learning-rate schedule, early stopping, the
training loop, and checkpoint round-trips.

Checkpoints are one NTSR file per registered parameter plus a
``manifest.tsv``; tied views are re-derived from their sources at build
time and never stored.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_tensor, save_tensor
from .losses import LossBreakdown, LossWeights, variant_loss
from .models import TIED_VARIANTS
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    lr0: float = 3e-4
    decay_factor: float = 0.9
    decay_every: int = 3
    decay_mode: str = "compound"  # "single" freezes after the first decay
    max_epochs: int = 200
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-5
    batch_size: int = 4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_below_train_loss: float = None  # overfit harness: stop once reached
    threshold: float = 1.5
    threshold_mode: str = "floor-ratio"  # or "absolute"

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0,1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.decay_mode not in ("compound", "single"):
            raise ValueError(f"decay_mode must be compound or single, got {self.decay_mode!r}")
        if self.early_stop_patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.early_stop_patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.threshold_mode not in ("floor-ratio", "absolute"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        self.loss_weights.validate()
        return self


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay schedule.

    compound: lr0 * f^floor(epoch/every). single: the literal one-time
    reading, constant lr0*f from the first decay boundary on.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if cfg.decay_mode == "single":
        return cfg.lr0 if epoch < cfg.decay_every else cfg.lr0 * cfg.decay_factor
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


class Adam:
    """Bias-corrected Adam over unique parameter storages.

    Handles are deduplicated by id, so a storage wired into many graph
    sites (shared or tied) is stepped exactly once using its accumulated
    gradient.
    """

    def __init__(self, handles, beta1=0.9, beta2=0.999, eps=1e-8):
        self.handles = []
        seen = set()
        for h in handles:
            if h.id not in seen:
                seen.add(h.id)
                self.handles.append(h)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {h.id: np.zeros_like(h.value.data) for h in self.handles}
        self.v = {h.id: np.zeros_like(h.value.data) for h in self.handles}

    def zero_grads(self):
        for h in self.handles:
            h.value.zero_grad()

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for h in self.handles:
            g = h.value.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient for parameter {h.name!r}")
            m = self.m[h.id]
            v = self.v[h.id]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            h.value.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, lr: float):
    state.step(lr)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    split: str
    breakdown: LossBreakdown


@dataclass
class TrainReport:
    epochs_run: int = 0
    rows: list = field(default_factory=list)
    initial_val: LossBreakdown = None
    best_epoch: int = None
    best_val_total: float = float("inf")
    stopped_early: bool = False
    wall_time_s: float = 0.0

    def val_totals(self):
        return [r.breakdown.l_h for r in self.rows if r.split == "val"]

    def epochs_to_threshold(self, threshold: float = None, mode: str = None) -> int:
        """First epoch whose validation total loss is at or under target.

        floor-ratio mode reads ``threshold`` as a multiple of the run's
        own best validation loss; absolute mode compares directly.
        Returns None when never reached.
        """
        totals = self.val_totals()
        if not totals:
            return None
        threshold = 1.5 if threshold is None else threshold
        mode = mode or "floor-ratio"
        if mode == "floor-ratio":
            target = threshold * min(totals)
        elif mode == "absolute":
            target = threshold
        else:
            raise ValueError(f"unknown threshold mode {mode!r}")
        for epoch, total in enumerate(totals):
            if total <= target:
                return epoch
        return None


EPOCH_COLUMNS = ["epoch", "lr", "l_image", "l_mask", "l_j0", "l_j1", "l_j2",
                 "l_j3", "l_j4", "l_t", "l_h1", "l_h", "split"]


def _fmt(v):
    return format(float(v), ".10g")


def write_epochs_csv(report: TrainReport, path):
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    try:
        with open(tmp, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(EPOCH_COLUMNS)
            for r in report.rows:
                lj = (list(r.breakdown.l_j) + [0.0] * 5)[:5]
                wr.writerow([r.epoch, _fmt(r.lr), _fmt(r.breakdown.l_image),
                             _fmt(r.breakdown.l_mask), *[_fmt(x) for x in lj],
                             _fmt(r.breakdown.l_t), _fmt(r.breakdown.l_h1),
                             _fmt(r.breakdown.l_h), r.split])
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


class _Accumulator:
    """Sample-count-weighted mean of LossBreakdown terms."""

    def __init__(self):
        self.n = 0
        self.sums = None

    def add(self, br: LossBreakdown, count: int):
        vec = [br.l_image, br.l_mask, *br.l_j, br.l_t, br.l_h1, br.l_h]
        if self.sums is None:
            self.sums = [0.0] * len(vec)
        for i, v in enumerate(vec):
            self.sums[i] += count * v
        self.n += count

    def mean(self) -> LossBreakdown:
        s = [v / self.n for v in self.sums]
        nj = len(s) - 5
        return LossBreakdown(l_image=s[0], l_mask=s[1], l_j=s[2:2 + nj],
                             l_t=s[-3], l_h1=s[-2], l_h=s[-1])


def _batches(indices, batch_size):
    for i in range(0, len(indices), batch_size):
        yield indices[i:i + batch_size]


def _stack(samples, indices):
    xs = np.stack([samples[i].x for i in indices])
    ms = np.stack([samples[i].m for i in indices])
    return Tensor(xs), Tensor(ms)


def validate_variant_weights(variant: str, weights: LossWeights):
    """Reject weight settings whose loss terms the variant cannot produce."""
    if weights.beta > 0 and variant not in TIED_VARIANTS:
        raise ValueError(
            f"beta={weights.beta} weights a reconstruction loss, but variant "
            f"{variant!r} has no tied decoder branch to produce one; "
            "set beta to 0 or pick twi/twae"
        )


def _eval_split(model, samples, indices, cfg):
    acc = _Accumulator()
    with no_grad():
        for batch in _batches(indices, cfg.batch_size):
            x, m = _stack(samples, batch)
            out = model.forward(x, None if model.config.variant == "unet" else m)
            _, br = variant_loss(model.config.variant, out, x, m,
                                 cfg.loss_weights, model.config.detach_mask_branch)
            acc.add(br, len(batch))
    return acc.mean()


def train(model, samples, dsplit, cfg: TrainConfig, out_dir=None) -> TrainReport:
    """Run the optimization loop; returns the per-epoch report.

    The best-validation parameter state is restored into the model at
    the end, and written as the checkpoint when ``out_dir`` is given.
    """
    cfg.validate()
    variant = model.config.variant
    weights = cfg.loss_weights
    validate_variant_weights(variant, weights)
    if not dsplit.val:
        raise ValueError("training needs a non-empty validation split")

    t_start = time.perf_counter()
    report = TrainReport()
    opt = Adam(model.registry.handles(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = np.random.default_rng((cfg.seed, 1))

    report.initial_val = _eval_split(model, samples, dsplit.val, cfg)
    best_state = None
    non_improving = 0

    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = [dsplit.train[i] for i in shuffle_rng.permutation(len(dsplit.train))]
        acc = _Accumulator()
        for batch in _batches(order, cfg.batch_size):
            x, m = _stack(samples, batch)
            out = model.forward(x, None if variant == "unet" else m)
            scalar, br = variant_loss(variant, out, x, m, weights,
                                      model.config.detach_mask_branch)
            opt.zero_grads()
            scalar.backward()
            opt.step(lr)
            acc.add(br, len(batch))
        train_br = acc.mean()
        val_br = _eval_split(model, samples, dsplit.val, cfg)
        report.rows.append(EpochRow(epoch, lr, "train", train_br))
        report.rows.append(EpochRow(epoch, lr, "val", val_br))
        report.epochs_run = epoch + 1

        if report.best_val_total - val_br.l_h > cfg.early_stop_min_delta:
            report.best_val_total = val_br.l_h
            report.best_epoch = epoch
            best_state = {name: h.value.data.copy()
                          for name, h in model.named_params().items()}
            non_improving = 0
        else:
            non_improving += 1

        if cfg.stop_below_train_loss is not None and train_br.l_h < cfg.stop_below_train_loss:
            break
        if non_improving >= cfg.early_stop_patience:
            report.stopped_early = True
            break

    if best_state is not None:
        for name, h in model.named_params().items():
            h.value.data[...] = best_state[name]
    report.wall_time_s = time.perf_counter() - t_start

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_epochs_csv(report, out / "epochs.csv")
        checkpoint_save(model, out / "checkpoint")
    return report


# -- checkpoints -------------------------------------------------------


def _param_filename(name: str) -> str:
    return name + ".ntsr"


def checkpoint_save(model, ckpt_dir):
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, h in model.named_params().items():
        fname = _param_filename(name)
        save_tensor(out / fname, h.value.data)
        shape = ",".join(str(s) for s in h.shape)
        rows.append(f"{name}\t{shape}\t{fname}")
    (out / "manifest.tsv").write_text(
        "name\tshape\tfile\n" + "".join(r + "\n" for r in rows)
    )


def checkpoint_load(model, ckpt_dir, strict: bool = True) -> list:
    """Restore parameters from a checkpoint directory.

    Loads and validates everything before touching the model, so a
    corrupt file leaves it unchanged. With strict=False, parameters
    absent from the checkpoint keep their fresh initialization and the
    mismatch is returned as warning strings.
    """
    root = Path(ckpt_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    staged = {}
    for line in manifest.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        name, shape_s, fname = line.split("\t")
        arr = load_tensor(root / fname)
        want = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        if arr.shape != want:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, manifest says {want}"
            )
        staged[name] = arr

    params = model.named_params()
    missing = sorted(set(params) - set(staged))
    extra = sorted(set(staged) - set(params))
    if strict and (missing or extra):
        raise ValueError(
            "checkpoint/model parameter sets differ; "
            f"missing from checkpoint: {missing or 'none'}; "
            f"unknown to model: {extra or 'none'}"
        )
    for name in params:
        if name in staged and params[name].shape != staged[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: model {params[name].shape}, "
                f"checkpoint {staged[name].shape}"
            )
    for name, h in params.items():
        if name in staged:
            h.value.data[...] = staged[name].astype(h.value.dtype)

    warnings = []
    if missing:
        warnings.append(
            f"{len(missing)} parameters not in checkpoint kept fresh init: "
            + ", ".join(missing)
        )
    if extra:
        warnings.append(
            f"{len(extra)} checkpoint entries unused: " + ", ".join(extra)
        )
    return warnings
