"""Fold evaluation, cross-validation, result tables and qualitative panels."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np
import torch
from PIL import Image

from .data import kfold_split
from .metrics import binarize, confusion_counts, iou_from_counts
from .ops import attention_gate
from .train import Checkpoint, TrainConfig, predict_batch, train

log = logging.getLogger(__name__)

AGGREGATION_NOTE = ("fold IoU = dataset-level ratio of confusion counts summed over all test images "
                    "(not a mean of per-image IoUs); mean/std over folds use the population std")

# full-scale reference values, mean (std) over 10 folds on MoNuSeg / TNBC; not reproducible on a desk CPU
REFERENCE_TABLE = {
    "baseline_ce": ((0.5710, 0.02), (0.5504, 0.04)),
    "pseudo_edge (large g)": ((0.5786, 0.04), (0.5787, 0.04)),
    "pseudo_edge": ((0.6059, 0.04), (0.5853, 0.03)),
    "pseudo_edge_attention": ((0.6136, 0.04), (0.6038, 0.03)),
    "fully supervised": ((0.6522, 0.03), (0.6619, 0.04)),
}
REFERENCE_LADDER = {
    "conv2": ((0.6117, 0.03), (0.5928, 0.04)),
    "conv4": ((0.6136, 0.04), (0.6038, 0.03)),
    "conv6": ((0.6105, 0.04), (0.5896, 0.03)),
    "conv8": ((0.6119, 0.02), (0.5934, 0.04)),
    "pyramid18": ((0.6005, 0.03), (0.5795, 0.04)),
    "pyramid34": ((0.6069, 0.03), (0.5796, 0.03)),
    "pyramid50": ((0.5786, 0.04), (0.5787, 0.04)),
}


@dataclass
class FoldResult:
    fold_index: int
    iou: float
    per_image_ious: list
    counts: list                      # summed [tp, fp, fn, tn]
    image_ids: list = field(default_factory=list)
    method: str = ""
    config_hash: str = ""
    checkpoint: str = ""
    best_epoch: int = -1
    best_val_iou: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "FoldResult":
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class MethodReport:
    method: str
    folds: list
    config_hash: str = ""

    def __post_init__(self):
        if not self.folds:
            raise ValueError(f"{self.method}: no fold results")

    @property
    def ious(self) -> np.ndarray:
        return np.array([f.iou for f in self.folds], dtype=np.float64)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious))

    @property
    def std_iou(self) -> float:
        return float(np.std(self.ious))


def evaluate_fold(checkpoint: Checkpoint, test_samples, threshold=0.5, fold_index=0) -> FoldResult:
    """Dataset-level IoU over ``test_samples``; per-image IoUs kept for diagnostics."""
    missing = [s.id for s in test_samples if s.instance_mask is None]
    if missing:
        raise ValueError(f"no ground-truth mask for {missing[:5]}")
    probs = predict_batch(checkpoint.network(), [s.image for s in test_samples], checkpoint.mean, checkpoint.std)
    total = np.zeros(4, dtype=np.int64)
    per_image = []
    for p, s in zip(probs, test_samples):
        c = confusion_counts(binarize(p, threshold), s.foreground())
        total += c
        per_image.append(iou_from_counts(c))
    return FoldResult(fold_index=fold_index, iou=iou_from_counts(total), per_image_ious=per_image,
                      counts=total.tolist(), image_ids=[s.id for s in test_samples],
                      method=checkpoint.method, config_hash=checkpoint.config_hash, best_epoch=checkpoint.epoch)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0] % (2 ** 31))


def cross_validate(samples, k: int, cfg: TrainConfig, out_dir=None, folds=None, split_seed=0,
                   threshold=None, resume=True) -> MethodReport:
    """Train and test every requested fold; returns the method's report.

    With ``out_dir`` each fold writes ``folds/{i}.json`` plus checkpoint and
    history; a fold whose JSON already carries the same config hash is
    loaded instead of retrained.
    """
    if len(samples) < k:
        raise ValueError(f"k={k} exceeds the corpus size ({len(samples)})")
    threshold = cfg.threshold if threshold is None else threshold
    byid = {s.id: s for s in samples}
    ids = [s.id for s in samples]
    results = []
    for fold in (range(k) if folds is None else folds):
        split = kfold_split(ids, k, fold, split_seed)
        fold_path = os.path.join(out_dir, "folds", f"{fold}.json") if out_dir else None
        if resume and fold_path and os.path.exists(fold_path):
            prev = FoldResult.load(fold_path)
            if prev.config_hash == cfg.config_hash and cfg.config_hash:
                log.info("fold %d: reusing %s", fold, fold_path)
                results.append(prev)
                continue
        fcfg = replace(cfg, seed=fold_seed(cfg.seed, fold))
        ckpt, history = train([byid[i] for i in split.train_ids], [byid[i] for i in split.val_ids], fcfg)
        res = evaluate_fold(ckpt, [byid[i] for i in split.test_ids], threshold, fold)
        res.best_val_iou = history.best_val_iou
        res.config_hash = cfg.config_hash
        if out_dir:
            ck_path = os.path.join(out_dir, "checkpoints", f"fold{fold}.pt")
            os.makedirs(os.path.dirname(ck_path), exist_ok=True)
            ckpt.save(ck_path)
            history.save(os.path.join(out_dir, "checkpoints", f"fold{fold}.history.json"))
            res.checkpoint = ck_path
            res.save(fold_path)
        log.info("%s fold %d: test iou %.4f (best val %.4f @ epoch %d)",
                 cfg.method, fold, res.iou, history.best_val_iou, history.best_epoch)
        results.append(res)
    return MethodReport(cfg.method, results, cfg.config_hash)


# tables -------------------------------------------------------------------

def _round(x: float, places: int) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_EVEN))


def format_cell(mean: float, std: float) -> str:
    """``mean (±std)``: mean to 4 places, std to 2, both round-half-even."""
    return f"{_round(mean, 4)} (±{_round(std, 2)})"


def emit_tables(reports, out_dir, labels=None, title="", extra_columns=None) -> dict:
    """Write ``report.csv`` and ``report.txt``; returns their paths.

    ``labels`` overrides the row names (defaults to each report's method);
    ``extra_columns`` maps column name -> list of per-row strings.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to tabulate")
    labels = list(labels) if labels is not None else [r.method for r in reports]
    extra_columns = extra_columns or {}
    os.makedirs(out_dir, exist_ok=True)
    header = ["method", "mean_iou", "std_iou", "folds", "cell"] + list(extra_columns)
    rows = []
    for i, (label, r) in enumerate(zip(labels, reports)):
        rows.append([label, f"{r.mean_iou:.6f}", f"{r.std_iou:.6f}", str(len(r.folds)),
                     format_cell(r.mean_iou, r.std_iou)] + [extra_columns[c][i] for c in extra_columns])
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)

    shown = ["method", "IoU"] + list(extra_columns)
    body = [[r[0], r[4]] + r[5:] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(shown, *body)]

    def line(cells):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"

    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    text = [f"# {title}" if title else "# results", f"# {AGGREGATION_NOTE}",
            f"# folds per method: {', '.join(str(len(r.folds)) for r in reports)}",
            sep, line(shown), sep] + [line(b) for b in body] + [sep]
    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w") as fh:
        fh.write("\n".join(text) + "\n")
    return {"csv": csv_path, "txt": txt_path}


# panels -------------------------------------------------------------------

def _gray(x, lo=0.0, hi=1.0):
    x = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0, 1)
    return np.round(x * 255).astype(np.uint8)


def signed_to_gray(x) -> np.ndarray:
    """Zero -> mid-gray (128), positive brighter, negative darker; symmetric scaling."""
    x = np.asarray(x, dtype=np.float64)
    m = np.abs(x).max()
    if m == 0:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.round(127.5 + 127.5 * x / m).astype(np.uint8)


def _tile(arr, size):
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.asarray(Image.fromarray(arr).resize((size[1], size[0]), Image.NEAREST))


@torch.no_grad()
def panel_columns(sample, checkpoint: Checkpoint, threshold=0.5) -> list[tuple[str, np.ndarray]]:
    """Named uint8 panels for one sample, left to right."""
    x = checkpoint.normalize(sample.image)
    f = checkpoint.network("segmentation")
    g = checkpoint.network("edge")
    h = checkpoint.network("attention")
    cols = [("input", _gray(sample.image))]
    att = None
    if h is not None:
        att = h(x)
        cols.append(("attention", _gray(att[0, 0].numpy())))
    if g is not None:
        edge = g(x)
        cols.append(("edge", signed_to_gray(edge[0].mean(0).numpy())))
        if att is not None:
            cols.append(("gated edge", signed_to_gray(attention_gate(edge, att)[0].mean(0).numpy())))
    prob = f(x)[0, 0].numpy()
    cols.append(("probability", _gray(prob)))
    cols.append(("prediction", _gray(binarize(prob, threshold).astype(np.float64))))
    if sample.instance_mask is not None:
        cols.append(("ground truth", _gray(sample.foreground().astype(np.float64))))
    return cols


def render_panels(samples, checkpoint: Checkpoint, out_path, tile=(128, 128), threshold=0.5):
    """One row per sample; columns omit g/h maps the checkpoint does not carry."""
    rows = []
    names = None
    for s in samples:
        cols = panel_columns(s, checkpoint, threshold)
        names = [n for n, _ in cols]
        rows.append(np.concatenate([_tile(c, tile) for _, c in cols], axis=1))
    if len({r.shape for r in rows}) > 1:
        raise ValueError("samples produced different column sets (some lack ground truth)")
    grid = np.concatenate(rows, axis=0)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    Image.fromarray(grid).save(out_path)
    return names
