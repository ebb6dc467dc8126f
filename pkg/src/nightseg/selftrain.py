"""Stage-2 supervision construction for the night domain.

Two signals co-teach the night prediction:

  * an offline pseudo-label written to disk by the frozen warm-up model
    (confidence-thresholded argmax, restricted to dynamic + shift-sensitive
    classes), and
  * an online signal built each step from the day-reference prediction:
    either the full static label map or its agreement with the night
    prediction, chosen by comparing the shift-sensitive-class label overlap
    ratio against a threshold tau.

High overlap means the two camera poses nearly coincide, so the raw static
map is trustworthy; low overlap means pose shift, so only pixels where day
and night predictions agree survive.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import torch

from .core import (
    ClassTaxonomy,
    LabelMap,
    OneHotMask,
    ProbMap,
    argmax_labels,
    load_label,
    onehot,
    save_label,
)


@dataclass(frozen=True)
class SelfTrainConfig:
    """Knobs of the stage-2 supervision pipeline."""

    tau: float = 0.5
    confidence_threshold: float = 0.9
    offline_classes: frozenset[int] | None = None  # default: dynamic + shift-sensitive
    online_classes: frozenset[int] | None = None  # default: static
    mutually_exclusive: bool = False  # offline wins where both signals hit a pixel
    disable_online: bool = False  # ablation: drop the online signal entirely

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must be in (0, 1)")

    def resolve_offline(self, taxonomy: ClassTaxonomy) -> frozenset[int]:
        if self.offline_classes is not None:
            return self.offline_classes
        return taxonomy.dynamic_ids | taxonomy.ssc_ids

    def resolve_online(self, taxonomy: ClassTaxonomy) -> frozenset[int]:
        if self.online_classes is not None:
            return self.online_classes
        return taxonomy.static_ids


def offline_pseudo(p: ProbMap, allowed: Iterable[int], threshold: float) -> OneHotMask:
    """Label a pixel with its argmax class iff the max probability clears the
    threshold and the class is allowed; all other pixels stay unsupervised."""
    conf, cls = p.data.max(dim=0)
    c = p.data.shape[0]
    allowed_vec = torch.zeros(c, dtype=torch.bool, device=p.data.device)
    for k in allowed:
        if 0 <= k < c:
            allowed_vec[k] = True
    keep = (conf >= threshold) & allowed_vec[cls]
    oh = torch.nn.functional.one_hot(cls, c).permute(2, 0, 1)
    return OneHotMask((oh * keep).to(torch.float32))


def static_map(p_ref: ProbMap, p_n: ProbMap, taxonomy: ClassTaxonomy) -> OneHotMask:
    """Day-reference argmax labels, kept only where both the reference and the
    night prediction are static; dynamic pixels on either side drop out."""
    l_ref = argmax_labels(p_ref).data
    l_n = argmax_labels(p_n).data
    static_vec = torch.zeros(taxonomy.num_classes, dtype=torch.bool)
    for k in taxonomy.static_ids:
        static_vec[k] = True
    keep = static_vec[l_ref] & static_vec[l_n]
    oh = torch.nn.functional.one_hot(l_ref, taxonomy.num_classes).permute(2, 0, 1)
    return OneHotMask((oh * keep).to(torch.float32))


def dna(y_static: OneHotMask, p_n: ProbMap) -> OneHotMask:
    """Day/night agreement: keep a static-labelled pixel only when the night
    argmax picks the same class. The result is a subset of ``y_static``."""
    l_n = argmax_labels(p_n).data
    agree = y_static.data.gather(0, l_n.unsqueeze(0)).squeeze(0) > 0
    return OneHotMask(y_static.data * agree)


def lor(l_n: LabelMap, l_ref: LabelMap, ssc: Iterable[int]) -> float:
    """Dice-style overlap of the shift-sensitive-class indicator sets of two
    label maps; 0 when neither map contains such a class."""
    ssc = set(ssc)
    in_n = torch.zeros_like(l_n.data, dtype=torch.bool)
    in_ref = torch.zeros_like(l_ref.data, dtype=torch.bool)
    for k in ssc:
        in_n |= l_n.data == k
        in_ref |= l_ref.data == k
    denom = int(in_n.sum()) + int(in_ref.sum())
    if denom == 0:
        return 0.0
    return 2.0 * int((in_n & in_ref).sum()) / denom


def select_online(lor_value: float, y_static: OneHotMask, y_dna: OneHotMask,
                  tau: float) -> OneHotMask:
    """Gate the online signal: full static map when overlap clears tau
    (inclusive), agreement-filtered map otherwise. Returns one of the two
    arguments unchanged, never a blend."""
    return y_static if lor_value >= tau else y_dna


def coteach_target(y_off: OneHotMask, y_on: OneHotMask,
                   mutually_exclusive: bool = False) -> torch.Tensor:
    """Additive co-teaching target: a pixel labelled by both signals
    contributes both cross-entropy terms (double weight on agreement).

    With ``mutually_exclusive`` the offline signal wins wherever it labels a
    pixel and the online contribution there is dropped.
    """
    if mutually_exclusive:
        off_hit = (y_off.data.sum(dim=0, keepdim=True) > 0).to(y_on.data.dtype)
        return y_off.data + y_on.data * (1 - off_hit)
    return y_off.data + y_on.data


# ---------------------------------------------------------------------------
# offline pseudo-label store
# ---------------------------------------------------------------------------


class PseudoLabelStore:
    """Directory of per-sample 8-bit pseudo-label files (255 = unlabeled) for
    the night and day-reference images, with a provenance sidecar."""

    NIGHT = "night"
    DAY_REF = "day_ref"

    def __init__(self, root: str | Path, taxonomy: ClassTaxonomy):
        self.root = Path(root)
        self.taxonomy = taxonomy

    def path(self, kind: str, sample_id: str) -> Path:
        return self.root / kind / f"{sample_id}.png"

    def write(self, kind: str, sample_id: str, mask: OneHotMask) -> None:
        d = self.root / kind
        d.mkdir(parents=True, exist_ok=True)
        labeled = mask.labeled_pixels()
        cls = mask.data.argmax(dim=0)
        lbl = torch.where(labeled, cls, torch.full_like(cls, self.taxonomy.ignore_id))
        save_label(LabelMap(lbl), self.path(kind, sample_id))

    def load(self, kind: str, sample_id: str) -> OneHotMask:
        p = self.path(kind, sample_id)
        if not p.exists():
            raise FileNotFoundError(
                f"missing offline pseudo-label for sample {sample_id!r} ({kind}): {p}"
            )
        return onehot(load_label(p, self.taxonomy), self.taxonomy)

    def write_sidecar(self, threshold: float, checkpoint_path: str | Path) -> None:
        digest = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "provenance.json").write_text(
            json.dumps(
                {
                    "confidence_threshold": threshold,
                    "checkpoint": str(checkpoint_path),
                    "checkpoint_sha256": digest,
                },
                indent=2,
            )
        )

    def sidecar(self) -> dict:
        return json.loads((self.root / "provenance.json").read_text())
