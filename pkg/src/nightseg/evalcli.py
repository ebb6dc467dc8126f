"""Evaluation: per-class IoU / mean IoU bookkeeping, checkpoint evaluation on
a dataset split, the threshold-sweep driver, visualization panels, and the
overlap-based day/night pair retrieval filter."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .core import ClassTaxonomy, Image, LabelMap, ProbMap, argmax_labels
from .datagen import load_manifest, load_sample
from .nets import ModelBundle, classify_batch, load_checkpoint
from .selftrain import lor

# display colors per default-taxonomy class id; ignore renders black
PALETTE = (
    (128, 64, 128),   # road
    (70, 70, 70),     # building
    (70, 130, 180),   # sky
    (107, 142, 35),   # vegetation
    (153, 153, 153),  # pole
    (220, 220, 0),    # sign
    (250, 170, 30),   # light
    (0, 0, 142),      # car
    (220, 20, 60),    # person
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts, rows = ground truth, cols = prediction; ignore excluded."""

    counts: np.ndarray

    def __post_init__(self):
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (c < 0).any():
            raise ValueError("confusion matrix counts must be nonnegative")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: LabelMap, gt: LabelMap,
               ignore_id: int = 255) -> ConfusionMatrix:
    """Count (gt, pred) pairs over non-ignore pixels into a new matrix."""
    if pred.data.shape != gt.data.shape:
        raise ValueError("prediction and ground truth sizes differ")
    c = cm.num_classes
    p = pred.data.reshape(-1).numpy()
    g = gt.data.reshape(-1).numpy()
    keep = g != ignore_id
    p, g = p[keep], g[keep]
    binc = np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + binc)


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the class has zero union) and their mean.
    Classes absent from both prediction and ground truth are excluded from
    the mean; if every class is absent, that's an error."""
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    per_class: list[float | None] = []
    present = []
    for c in range(cm.num_classes):
        if union[c] == 0:
            per_class.append(None)
        else:
            iou = diag[c] / union[c]
            per_class.append(iou)
            present.append(iou)
    if not present:
        raise ValueError("no class is present in either prediction or ground truth")
    return per_class, float(np.mean(present))


def predict_labels(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    """Batched argmax prediction at native resolution (no augmentation)."""
    with torch.no_grad():
        p = classify_batch(bundle.enc(x), bundle)
    return torch.stack([argmax_labels(ProbMap(p[i])).data for i in range(p.shape[0])])


def evaluate_split(bundle: ModelBundle, data_dir: str | Path, split: str,
                   taxonomy: ClassTaxonomy, batch: int = 8) -> dict:
    """mIoU of night predictions against held-out night labels on a split."""
    manifest = load_manifest(data_dir, split)
    if not manifest.eval_split:
        raise ValueError(f"split {split!r} has no night ground truth")
    bundle.eval()
    cm = ConfusionMatrix.zeros(taxonomy.num_classes)
    entries = list(manifest.entries)
    for i in range(0, len(entries), batch):
        chunk = entries[i : i + batch]
        xs, gts = [], []
        for e in chunk:
            sample, y_night = load_sample(data_dir, e, taxonomy)
            xs.append(sample.x_night.data)
            gts.append(y_night)
        preds = predict_labels(bundle, torch.stack(xs))
        for j, gt in enumerate(gts):
            cm = accumulate(cm, LabelMap(preds[j]), gt, taxonomy.ignore_id)
    bundle.train()
    per_class, mean = miou(cm)
    return {
        "split": split,
        "miou": mean,
        "per_class": {taxonomy.names[c]: v for c, v in enumerate(per_class)},
        "pixels": int(cm.counts.sum()),
    }


def evaluate_checkpoint(ckpt_path: str | Path, data_dir: str | Path, split: str = "val") -> dict:
    taxonomy = ClassTaxonomy.load(Path(data_dir) / "taxonomy.json")
    bundle, meta = load_checkpoint(ckpt_path)
    result = evaluate_split(bundle, data_dir, split, taxonomy)
    result["checkpoint"] = str(ckpt_path)
    result["stage"] = meta["stage"]
    result["step"] = meta["step"]
    return result


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

DEFAULT_TAU_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def sweep_tau(base_cfg, data_dir: str | Path, out_root: str | Path,
              taus=DEFAULT_TAU_GRID, split: str = "val") -> list[dict]:
    """Run the self-training stage once per threshold from the same warm-up
    checkpoint and seed; returns one row per threshold with its mIoU and the
    online-selection counts observed during training."""
    from .trainer import run

    out_root = Path(out_root)
    rows = []
    for tau in taus:
        cfg = replace(base_cfg, selftrain=replace(base_cfg.selftrain, tau=tau))
        run_dir = out_root / f"tau_{tau:.2f}"
        result = run(cfg, data_dir, run_dir)
        ev = evaluate_checkpoint(result.final_checkpoint, data_dir, split)
        n_static, n_dna, traces = _selection_counts(result.metrics_path)
        rows.append({
            "tau": tau,
            "miou": ev["miou"],
            "n_static": n_static,
            "n_dna": n_dna,
            "selection_trace": traces,
            "run_dir": str(run_dir),
        })
    (out_root / "tau_sweep.json").write_text(json.dumps(
        [{k: v for k, v in r.items() if k != "selection_trace"} for r in rows], indent=2))
    return rows


def _selection_counts(metrics_path: str | Path) -> tuple[int, int, list]:
    n_static = n_dna = 0
    traces = []
    with open(metrics_path) as f:
        for line in f:
            rec = json.loads(line)
            sels = rec.get("online_sel", [])
            lors = rec.get("lor", [])
            n_static += sum(1 for s in sels if s == "static")
            n_dna += sum(1 for s in sels if s == "dna")
            traces.extend(zip(lors, sels))
    return n_static, n_dna, traces


# ---------------------------------------------------------------------------
# visualization
# ---------------------------------------------------------------------------


def colorize_labels(l: LabelMap, taxonomy: ClassTaxonomy) -> np.ndarray:
    """Label map -> HxWx3 uint8 via the fixed palette; ignore -> black."""
    arr = l.data.numpy()
    out = np.zeros((*arr.shape, 3), dtype=np.uint8)
    for c in range(taxonomy.num_classes):
        out[arr == c] = PALETTE[c % len(PALETTE)]
    return out


def labels_from_colors(rgb: np.ndarray, taxonomy: ClassTaxonomy) -> LabelMap:
    """Invert :func:`colorize_labels`; unmatched colors map to ignore."""
    out = np.full(rgb.shape[:2], taxonomy.ignore_id, dtype=np.int64)
    for c in range(taxonomy.num_classes):
        m = (rgb == np.array(PALETTE[c % len(PALETTE)], dtype=np.uint8)).all(axis=-1)
        out[m] = c
    return LabelMap(torch.from_numpy(out))


def render_panel(x: Image, pred: LabelMap, *aux: LabelMap,
                 taxonomy: ClassTaxonomy, out_path: str | Path) -> Path:
    """Write a side-by-side panel: input image, colorized prediction, then any
    extra label maps. Deterministic bytes for identical inputs."""
    tiles = [(((x.data.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
              .permute(1, 2, 0).numpy())]
    tiles.append(colorize_labels(pred, taxonomy))
    for a in aux:
        tiles.append(colorize_labels(a, taxonomy))
    panel = np.concatenate(tiles, axis=1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(panel, mode="RGB").save(out_path)
    return out_path


# ---------------------------------------------------------------------------
# day/night pair retrieval via the overlap filter
# ---------------------------------------------------------------------------


def retrieve_pairs(ckpt_path: str | Path, data_dir: str | Path, split: str = "train",
                   lor_min: float = 0.5) -> list[dict]:
    """Emit the day/night pairs whose predicted shift-sensitive-class overlap
    ratio clears `lor_min` -- high overlap indicates near-identical capture
    poses, which makes these pairs useful for cross-domain matching."""
    taxonomy = ClassTaxonomy.load(Path(data_dir) / "taxonomy.json")
    bundle, _ = load_checkpoint(ckpt_path)
    bundle.eval()
    manifest = load_manifest(data_dir, split)
    hits = []
    with torch.no_grad():
        for e in manifest.entries:
            sample, _ = load_sample(data_dir, e, taxonomy)
            x = torch.stack([sample.x_night.data, sample.x_day_ref.data])
            p = classify_batch(bundle.enc(x), bundle)
            v = lor(argmax_labels(ProbMap(p[0])), argmax_labels(ProbMap(p[1])),
                    taxonomy.ssc_ids)
            if v >= lor_min:
                hits.append({"sample_id": e.sample_id, "lor": v,
                             "night": e.night, "day_ref": e.day_ref})
    return hits
