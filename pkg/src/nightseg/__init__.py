"""nightseg: day-to-night domain adaptation for semantic segmentation.

Two-stage pipeline: a warm-up stage trains a shared encoder/classifier
through intra-domain and cross-domain reconstruction loops with semantically
rendered decoders, then a self-training stage refines night predictions by
co-teaching an offline confidence-filtered pseudo-label with an online
signal gated on day/night prediction agreement.
"""

__version__ = "0.1.0"

from .core import (
    ClassTaxonomy,
    Image,
    LabelMap,
    LatentFeature,
    OneHotMask,
    PairedSample,
    ProbMap,
    default_taxonomy,
)

__all__ = [
    "ClassTaxonomy",
    "Image",
    "LabelMap",
    "LatentFeature",
    "OneHotMask",
    "PairedSample",
    "ProbMap",
    "default_taxonomy",
    "__version__",
]
