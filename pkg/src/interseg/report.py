"""Evaluation metrics (Dice, IoU, object-size-bucketed Dice), per-sample
evaluation of a trained model, and the CSV sinks.

Bucketed Dice restricts the ground truth to connected components at or
under an area threshold and masks the prediction to a 2-step dilation
of that region, so stray predictions far from small objects do not
drown the small-object score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import Tensor

_CONNECTIVITY = np.ones((3, 3), dtype=bool)  # 8-connected components
DEFAULT_SMALL_AREA = 50
DILATION_STEPS = 2


def _as_bool(a):
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.asarray(arr, dtype=bool)


def _check_shapes(p, t, op):
    if p.shape != t.shape:
        raise ValueError(f"{op}: shapes differ, {p.shape} vs {t.shape}")


def dice_score(pred_bin, m) -> float:
    """2|P&T| / (|P|+|T|); both empty counts as a perfect 1.0."""
    p, t = _as_bool(pred_bin), _as_bool(m)
    _check_shapes(p, t, "dice_score")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def iou_score(pred_bin, m) -> float:
    p, t = _as_bool(pred_bin), _as_bool(m)
    _check_shapes(p, t, "iou_score")
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def _bucket_dice(pred_bin, m, keep_small: bool, threshold_px: int):
    """Dice over the components in one size bucket; None when the
    sample has no such component."""
    p, t = _as_bool(pred_bin), _as_bool(m)
    _check_shapes(p, t, "bucketed dice")
    p2 = p.reshape(p.shape[-2:])
    t2 = t.reshape(t.shape[-2:])
    labels, count = ndimage.label(t2, structure=_CONNECTIVITY)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(t2, dtype=np.int64), labels,
                               index=np.arange(1, count + 1))
    if keep_small:
        wanted = [i + 1 for i, s in enumerate(sizes) if s <= threshold_px]
    else:
        wanted = [i + 1 for i, s in enumerate(sizes) if s > threshold_px]
    if not wanted:
        return None
    region = np.isin(labels, wanted)
    neighborhood = ndimage.binary_dilation(region, iterations=DILATION_STEPS)
    return dice_score(p2 & neighborhood, region)


def small_object_dice(pred_bin, m, areas=None, threshold_px: int = DEFAULT_SMALL_AREA):
    """Dice restricted to ground-truth objects with area <= threshold.

    ``areas`` (the generator's per-object bookkeeping) short-circuits
    samples that have no small object; the region itself always comes
    from labeling the mask.
    """
    if areas is not None and not any(a <= threshold_px for a in areas):
        return None
    return _bucket_dice(pred_bin, m, True, threshold_px)


def large_object_dice(pred_bin, m, areas=None, threshold_px: int = DEFAULT_SMALL_AREA):
    if areas is not None and not any(a > threshold_px for a in areas):
        return None
    return _bucket_dice(pred_bin, m, False, threshold_px)


@dataclass
class EvalResult:
    """Aggregate metrics plus per-sample rows.

    Bucketed means are over the samples that contain the bucket; the
    ``n_*`` counters say how many that was.
    """

    dice: float = 0.0
    iou: float = 0.0
    dice_small: float = None
    dice_large: float = None
    n_samples: int = 0
    n_small: int = 0
    n_large: int = 0
    per_sample: list = field(default_factory=list)  # (sample_id, dice, iou, ds, dl)


def evaluate(model, samples, indices, threshold_px: int = DEFAULT_SMALL_AREA,
             batch_size: int = 8) -> EvalResult:
    """Threshold the image-branch prediction at 0.5 and score each sample."""
    res = EvalResult()
    dices, ious, smalls, larges = [], [], [], []
    for i in range(0, len(indices), batch_size):
        chunk = indices[i:i + batch_size]
        x = Tensor(np.stack([samples[j].x for j in chunk]))
        pred = model.predict(x).data >= 0.5
        for row, j in enumerate(chunk):
            m = samples[j].m.astype(bool)
            p = pred[row]
            d = dice_score(p, m)
            ji = iou_score(p, m)
            ds = small_object_dice(p, m, samples[j].areas, threshold_px)
            dl = large_object_dice(p, m, samples[j].areas, threshold_px)
            dices.append(d)
            ious.append(ji)
            if ds is not None:
                smalls.append(ds)
            if dl is not None:
                larges.append(dl)
            res.per_sample.append((j, d, ji, ds, dl))
    res.n_samples = len(dices)
    res.n_small = len(smalls)
    res.n_large = len(larges)
    res.dice = float(np.mean(dices)) if dices else 0.0
    res.iou = float(np.mean(ious)) if ious else 0.0
    res.dice_small = float(np.mean(smalls)) if smalls else None
    res.dice_large = float(np.mean(larges)) if larges else None
    return res


@dataclass
class ConvergenceRow:
    variant: str
    seed: int
    epochs_to_threshold: int = None  # None marks not-reached or failed
    wall_time_s: float = None
    final_val_dice: float = None
    failed: bool = False


EVAL_COLUMNS = ["sample_id", "dice", "iou", "dice_small", "dice_large"]
CONVERGENCE_COLUMNS = ["variant", "seed", "epochs_to_threshold", "wall_time_s",
                       "final_val_dice"]


def _fmt(v, digits=".10g"):
    return "" if v is None else format(float(v), digits)


def _write_csv(path, header, rows):
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    try:
        with open(tmp, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            wr.writerows(rows)
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def emit_eval(result: EvalResult, path):
    if not result.per_sample:
        raise ValueError("no evaluation rows to write")
    rows = [[sid, _fmt(d), _fmt(ji), _fmt(ds), _fmt(dl)]
            for sid, d, ji, ds, dl in result.per_sample]
    _write_csv(path, EVAL_COLUMNS, rows)


def emit_convergence(rows, path):
    if not rows:
        raise ValueError("no convergence rows to write")
    out = []
    for r in rows:
        epochs = "" if r.epochs_to_threshold is None else str(r.epochs_to_threshold)
        out.append([r.variant, r.seed, epochs, _fmt(r.wall_time_s),
                    _fmt(r.final_val_dice)])
    _write_csv(path, CONVERGENCE_COLUMNS, out)


def parse_convergence(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for rec in rd:
            rows.append(ConvergenceRow(
                variant=rec["variant"],
                seed=int(rec["seed"]),
                epochs_to_threshold=(int(rec["epochs_to_threshold"])
                                     if rec["epochs_to_threshold"] else None),
                wall_time_s=(float(rec["wall_time_s"])
                             if rec["wall_time_s"] else None),
                final_val_dice=(float(rec["final_val_dice"])
                                if rec["final_val_dice"] else None),
                failed=rec["wall_time_s"] == "" and rec["final_val_dice"] == "",
            ))
    return rows
