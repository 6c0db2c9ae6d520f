"""Leave-one-subject-out evaluation, the complexity sweep and CAM export."""

from __future__ import annotations

import csv
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import FlowDataset, write_pgm
from ..engine import no_grad, resize_bilinear
from ..models import ArchDescriptor, RcnModel, class_weight_map, named_descriptor
from .metrics import compute_uar, compute_uf1, confusion_matrix
from .training import TrainConfig, TrainLog, predict, train_single

REPORT_FORMAT = "rcnmer-loso-report"


@dataclass
class FoldResult:
    index: int
    subject: str
    confusion: np.ndarray
    n_train: int
    n_test: int
    epochs: int
    final_loss: float
    seconds: float
    sample_ids: list[str] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "type": "fold",
            "index": self.index,
            "subject": self.subject,
            "confusion": self.confusion.tolist(),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "epochs": self.epochs,
            "final_loss": self.final_loss,
            "seconds": round(self.seconds, 3),
            "sample_ids": self.sample_ids,
            "predictions": self.predictions,
        }


@dataclass
class EvalReport:
    descriptor: str
    train_config: dict
    folds: list[FoldResult]
    confusion: np.ndarray
    uar: float
    uf1: float
    per_domain: dict[str, dict]
    seconds: float

    def records(self, timings: bool = True) -> list[dict]:
        folds = [f.to_dict() for f in self.folds]
        summary = {
            "type": "summary",
            "format": REPORT_FORMAT,
            "version": 1,
            "descriptor": self.descriptor,
            "train_config": self.train_config,
            "confusion": self.confusion.tolist(),
            "uar": self.uar,
            "uf1": self.uf1,
            "per_domain": self.per_domain,
            "seconds": round(self.seconds, 3),
        }
        if not timings:
            # wall-clock values are the only non-deterministic fields
            for f in folds:
                f.pop("seconds")
            summary.pop("seconds")
        return folds + [summary]

    def write_jsonl(self, path, timings: bool = True) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records(timings)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    """Parse a report file into ``{"folds": [...], "summary": {...}}``."""
    folds, summary = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("type") == "fold":
            folds.append(rec)
        elif rec.get("type") == "summary":
            summary = rec
    if summary is None or summary.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not a LOSO report")
    return {"folds": folds, "summary": summary}


def train_fold(data: FlowDataset, descriptor: ArchDescriptor, cfg: TrainConfig, fold_index: int,
               subject: str) -> tuple[RcnModel, TrainLog, FlowDataset, FlowDataset]:
    """Train on every subject except ``subject`` with seed ``cfg.seed + fold_index``."""
    train = data.where_subject([subject], include=False)
    test = data.where_subject([subject], include=True)
    missing = sorted(set(range(descriptor.num_classes)) - set(np.unique(train.y).tolist()))
    if missing:
        warnings.warn(f"fold {fold_index} ({subject}): no training samples for classes {missing}",
                      RuntimeWarning, stacklevel=2)
    model, log = train_single(train, descriptor, cfg.with_(seed=cfg.seed + fold_index))
    return model, log, train, test


def _run_fold(args) -> FoldResult:
    data, descriptor, cfg, index, subject = args
    t0 = time.perf_counter()
    model, log, train, test = train_fold(data, descriptor, cfg, index, subject)
    pred = predict(model, test.x)
    return FoldResult(
        index, subject, confusion_matrix(test.y, pred, descriptor.num_classes), len(train), len(test),
        log.epochs, float(log.epoch_losses[-1]), time.perf_counter() - t0,
        [str(s) for s in test.sample_ids], [int(p) for p in pred],
    )


def _domain_breakdown(data: FlowDataset, folds: list[FoldResult], num_classes: int) -> dict[str, dict]:
    pred_of = {sid: p for f in folds for sid, p in zip(f.sample_ids, f.predictions)}
    out = {}
    for dom in sorted(set(data.domains.tolist())):
        sel = np.flatnonzero(data.domains == dom)
        cm = confusion_matrix(data.y[sel], [pred_of[str(data.sample_ids[i])] for i in sel], num_classes)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[dom] = {"confusion": cm.tolist(), "uar": compute_uar(cm, allow_empty=True), "uf1": compute_uf1(cm)}
    return out


def run_loso(data: FlowDataset, descriptor: ArchDescriptor, cfg: TrainConfig, workers: int = 1) -> EvalReport:
    """Leave-one-subject-out: one fresh model per held-out subject.

    Metrics come from the confusion matrix accumulated over all folds.
    Folds are seeded independently, so ``workers > 1`` gives the same report.
    """
    subjects = sorted(set(data.subjects.tolist()))
    if len(subjects) < 2:
        raise ValueError("LOSO needs at least two subjects")
    if data.resolution != descriptor.input_resolution:
        raise ValueError(f"data resolution {data.resolution} does not match descriptor R={descriptor.input_resolution}")
    t0 = time.perf_counter()
    jobs = [(data, descriptor, cfg, i, s) for i, s in enumerate(subjects)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold, jobs))
    else:
        folds = [_run_fold(j) for j in jobs]
    cm = sum((f.confusion for f in folds), np.zeros((descriptor.num_classes,) * 2, dtype=np.int64))
    return EvalReport(
        descriptor.to_string(), cfg.to_dict(), folds, cm, compute_uar(cm, allow_empty=True), compute_uf1(cm),
        _domain_breakdown(data, folds, descriptor.num_classes), time.perf_counter() - t0,
    )


# -- complexity sweep ---------------------------------------------------------

SWEEP_MODELS = ("model1", "model2", "model3", "model4")
SWEEP_RESOLUTIONS = (20, 40, 60, 80, 100, 150, 200, 250, 300)
SWEEP_FIELDS = ("model", "resolution", "seed", "uar", "uf1", "descriptor")


def complexity_sweep(load, models=SWEEP_MODELS, resolutions=SWEEP_RESOLUTIONS, seeds=(0,),
                     cfg: TrainConfig | None = None, feature_maps: int = 16, pool_size: int = 5,
                     workers: int = 1, progress=None) -> list[dict]:
    """LOSO UAR for every (model, resolution, seed).

    ``load(resolution)`` returns the :class:`FlowDataset` for that resolution.
    """
    cfg = cfg or TrainConfig()
    rows = []
    for r in resolutions:
        data = load(r)
        for kind in models:
            desc = named_descriptor(kind, feature_maps, pool_size, 3, r)
            for seed in seeds:
                rep = run_loso(data, desc, cfg.with_(seed=seed), workers)
                row = {"model": kind, "resolution": r, "seed": seed, "uar": rep.uar, "uf1": rep.uf1,
                       "descriptor": rep.descriptor}
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def sweep_summary(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["model"], int(row["resolution"])), []).append(row)
    out = []
    for (model, r), rs in sorted(groups.items()):
        uars = np.array([float(x["uar"]) for x in rs])
        uf1s = np.array([float(x["uf1"]) for x in rs])
        out.append({"model": model, "resolution": r, "seeds": len(rs),
                    "uar_mean": uars.mean(), "uar_std": uars.std(), "uf1_mean": uf1s.mean(), "uf1_std": uf1s.std()})
    return out


def write_csv(rows: list[dict], path, fieldnames=None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else SWEEP_FIELDS))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# -- class activation maps --------------------------------------------------

def cam_map(model: RcnModel, raw_x: np.ndarray, classes="predicted") -> tuple[np.ndarray, np.ndarray]:
    """Class activation maps at input resolution, shape [N, R, R], plus predictions.

    ``classes="predicted"`` weights the pooled features with the predicted
    class's classifier weights; ``"all"`` sums over classes like the
    attention unit does.
    """
    d = model.descriptor
    x = np.asarray(raw_x)
    if x.ndim == 3:
        x = x[None]
    with no_grad():
        res = model(model.normalize(x), training=False)
        pred = res.probs.data.argmax(axis=1)
        sel = pred if classes == "predicted" else None
        raw = class_weight_map(res.taps["features"], model.cls_weight.data, d.pool_size, sel)
        up = resize_bilinear(raw, d.input_resolution, d.input_resolution)
    return up.data[:, 0], pred


def to_uint8(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes flat mid-gray."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_cam(model: RcnModel, sample: np.ndarray, out_path, classes="predicted") -> np.ndarray:
    """Write the CAM of one raw flow map [3, R, R] as an 8-bit P5 image."""
    maps, _ = cam_map(model, sample, classes)
    img = to_uint8(maps[0])
    write_pgm(out_path, img)
    return img


def top_decile_inside(cam: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of the top-10% CAM pixels that fall inside ``mask``."""
    flat = cam.reshape(-1)
    k = max(1, int(np.ceil(0.1 * flat.size)))
    top = np.argsort(-flat, kind="stable")[:k]
    return float(mask.reshape(-1)[top].mean())
