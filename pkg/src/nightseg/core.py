"""Shared domain types and per-pixel map algebra.

This file is the contract between all other modules: class taxonomy,
image/feature/probability/label containers and the small operations
(argmax, one-hot, channel restriction) everything else builds on.

Array conventions:
  images          float tensor, 3 x H x W, values in [-1, 1]
  latent features float tensor, C_f x (H/8) x (W/8)
  probability maps float tensor, C x H x W, per-pixel channel sum == 1
  label maps      integer tensor, H x W, values in {0..C-1} or ignore_id
  one-hot masks   {0,1} tensor, C x H x W, per-pixel channel sum in {0,1}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

IGNORE_ID = 255

DOMAIN_TAGS = ("day", "night", "day_ref", "translated")


class TaxonomyError(ValueError):
    """Raised when a class taxonomy violates its structural constraints."""


@dataclass(frozen=True)
class ClassTaxonomy:
    """Class inventory split into static/dynamic ids with a shift-sensitive subset.

    ``ssc_ids`` marks the thin static classes (poles, signs, lights) whose
    pixel footprint changes sharply under a camera pose shift; they drive the
    overlap-ratio gating during self-training. ``ignore_id`` labels pixels
    excluded from supervision and evaluation.
    """

    num_classes: int
    names: tuple[str, ...]
    static_ids: frozenset[int]
    dynamic_ids: frozenset[int]
    ssc_ids: frozenset[int]
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        c = self.num_classes
        if c <= 0:
            raise TaxonomyError("num_classes must be positive")
        if len(self.names) != c:
            raise TaxonomyError(f"expected {c} class names, got {len(self.names)}")
        all_ids = set(range(c))
        if self.static_ids | self.dynamic_ids != all_ids:
            raise TaxonomyError("static_ids and dynamic_ids must cover all class ids")
        if self.static_ids & self.dynamic_ids:
            raise TaxonomyError("static_ids and dynamic_ids must be disjoint")
        if not self.ssc_ids <= self.static_ids:
            raise TaxonomyError("ssc_ids must be a subset of static_ids")
        if 0 <= self.ignore_id < c:
            raise TaxonomyError("ignore_id must lie outside the class id range")

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_classes": self.num_classes,
                "names": list(self.names),
                "static_ids": sorted(self.static_ids),
                "dynamic_ids": sorted(self.dynamic_ids),
                "ssc_ids": sorted(self.ssc_ids),
                "ignore_id": self.ignore_id,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClassTaxonomy":
        d = json.loads(text)
        return cls(
            num_classes=d["num_classes"],
            names=tuple(d["names"]),
            static_ids=frozenset(d["static_ids"]),
            dynamic_ids=frozenset(d["dynamic_ids"]),
            ssc_ids=frozenset(d["ssc_ids"]),
            ignore_id=d["ignore_id"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ClassTaxonomy":
        return cls.from_json(Path(path).read_text())


def default_taxonomy() -> ClassTaxonomy:
    """Nine-class toy taxonomy: four broad static classes, three thin
    shift-sensitive ones, two dynamic ones."""
    return ClassTaxonomy(
        num_classes=9,
        names=(
            "road",
            "building",
            "sky",
            "vegetation",
            "pole",
            "sign",
            "light",
            "car",
            "person",
        ),
        static_ids=frozenset({0, 1, 2, 3, 4, 5, 6}),
        dynamic_ids=frozenset({7, 8}),
        ssc_ids=frozenset({4, 5, 6}),
    )


def _check_spatial(h: int, w: int) -> None:
    if h < 16 or w < 16 or h % 8 or w % 8:
        raise ValueError(f"spatial dims must be >= 16 and divisible by 8, got {h}x{w}")


@dataclass(frozen=True)
class Image:
    """An RGB image in [-1, 1] tagged with the domain it belongs to."""

    data: torch.Tensor
    domain_tag: str = "day"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"image must be 3xHxW, got {tuple(self.data.shape)}")
        _check_spatial(self.data.shape[1], self.data.shape[2])
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def validate(self) -> "Image":
        if not torch.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min() < -1 or self.data.max() > 1:
            raise ValueError("image values must lie in [-1, 1]")
        return self


@dataclass(frozen=True)
class LatentFeature:
    """Encoder output at 1/8 spatial resolution."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"latent must be CxhxW, got {tuple(self.data.shape)}")

    def validate(self) -> "LatentFeature":
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")
        return self


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, C x H x W."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"prob map must be CxHxW, got {tuple(self.data.shape)}")

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    def validate(self, tol: float = 1e-5) -> "ProbMap":
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = self.data.sum(dim=0)
        if (sums - 1).abs().max() > tol:
            raise ValueError("per-pixel channel sums must equal 1")
        return self


@dataclass(frozen=True)
class LabelMap:
    """Hard per-pixel labels, H x W, ignore_id marks unsupervised pixels."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"label map must be HxW, got {tuple(self.data.shape)}")
        if self.data.dtype.is_floating_point or self.data.dtype.is_complex:
            raise ValueError("label map must be an integer tensor")

    def validate(self, taxonomy: ClassTaxonomy) -> "LabelMap":
        vals = torch.unique(self.data)
        ok = (vals == taxonomy.ignore_id) | ((vals >= 0) & (vals < taxonomy.num_classes))
        if not ok.all():
            bad = vals[~ok].tolist()
            raise ValueError(f"label map contains invalid ids {bad}")
        return self


@dataclass(frozen=True)
class OneHotMask:
    """Sparse one-hot supervision target; all-zero pixels are unsupervised."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"one-hot mask must be CxHxW, got {tuple(self.data.shape)}")

    def validate(self) -> "OneHotMask":
        vals = torch.unique(self.data)
        if not ((vals == 0) | (vals == 1)).all():
            raise ValueError("one-hot mask entries must be in {0, 1}")
        sums = self.data.sum(dim=0)
        if sums.max() > 1:
            raise ValueError("one-hot mask pixels may set at most one channel")
        return self

    def labeled_pixels(self) -> torch.Tensor:
        """Boolean HxW map of pixels carrying a supervision channel."""
        return self.data.sum(dim=0) > 0


@dataclass(frozen=True)
class PairedSample:
    """One training step's worth of data: a labelled day pair plus an
    unlabelled night image with its day reference view."""

    x_day: Image
    y_day: LabelMap
    x_night: Image
    x_day_ref: Image
    sample_id: str = ""

    def __post_init__(self):
        shapes = {
            self.x_day.data.shape[1:],
            tuple(self.y_day.data.shape),
            self.x_night.data.shape[1:],
            self.x_day_ref.data.shape[1:],
        }
        norm = {tuple(s) for s in shapes}
        if len(norm) != 1:
            raise ValueError(f"sample maps disagree on spatial size: {sorted(norm)}")


def argmax_labels(p: ProbMap) -> LabelMap:
    """Per-pixel argmax over channels; ties go to the lowest class id."""
    d = p.data
    c = d.shape[0]
    maxv = d.max(dim=0, keepdim=True).values
    ids = torch.arange(c, device=d.device).view(c, 1, 1).expand_as(d)
    first = torch.where(d == maxv, ids, torch.full_like(ids, c)).min(dim=0).values
    return LabelMap(first.to(torch.int64))


def onehot(l: LabelMap, taxonomy: ClassTaxonomy) -> OneHotMask:
    """One-hot encode a label map; ignore pixels become all-zero."""
    valid = l.data != taxonomy.ignore_id
    idx = torch.where(valid, l.data, torch.zeros_like(l.data)).to(torch.int64)
    oh = F.one_hot(idx, taxonomy.num_classes).permute(2, 0, 1)
    return OneHotMask((oh * valid).to(torch.float32))


def restrict(mask: OneHotMask, allowed: Iterable[int]) -> OneHotMask:
    """Zero out channels not in ``allowed``; affected pixels become unsupervised."""
    c = mask.data.shape[0]
    keep = torch.zeros(c, dtype=mask.data.dtype, device=mask.data.device)
    for k in allowed:
        if 0 <= k < c:
            keep[k] = 1
    return OneHotMask(mask.data * keep.view(c, 1, 1))


# ---------------------------------------------------------------------------
# serialization: label maps as 8-bit single-channel images, 255 = ignore
# ---------------------------------------------------------------------------


def save_label(l: LabelMap, path: str | Path) -> None:
    arr = l.data.cpu().numpy().astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_label(path: str | Path, taxonomy: ClassTaxonomy) -> LabelMap:
    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.int64)
    out = torch.from_numpy(arr.copy())
    if taxonomy.ignore_id != 255:
        out = torch.where(out == 255, torch.full_like(out, taxonomy.ignore_id), out)
    return LabelMap(out).validate(taxonomy)


def save_image(img: Image, path: str | Path) -> None:
    arr = ((img.data.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    PILImage.fromarray(arr, mode="RGB").save(path)


def load_image(path: str | Path, domain_tag: str = "day") -> Image:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32)
    t = torch.from_numpy(arr.copy()).permute(2, 0, 1) / 127.5 - 1.0
    return Image(t, domain_tag)
