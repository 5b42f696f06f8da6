"""Fixed-length fingerprint template matching and large-scale search.

Covers everything downstream of the embedding network: 8-bit template
compression, cosine and integer-domain matching, exhaustive and
product-quantized top-k search, minutiae re-ranking, the minutiae-map
heatmap codec, and a synthetic benchmark harness.
"""

from .template import (
    DIM,
    CompressedTemplate,
    MatchScore,
    Template,
    compress,
    cosine_score,
    decompress,
    integer_score,
)
from .minutiae import (
    Minutia,
    MinutiaeMap,
    MinutiaeSet,
    decode_map,
    encode_map,
    orientation_diff,
    scale_set,
)
from .matcher import MinutiaMatchConfig, minutiae_score
from .gallery import Gallery, GalleryRecord
from .search import Candidate, CandidateList, ExactSearcher, search_topk
from .pq import PQIndex, pq_search_topk
from .rerank import FusionConfig, fused_verify, two_stage_search

__all__ = [
    "DIM",
    "Candidate",
    "CandidateList",
    "CompressedTemplate",
    "ExactSearcher",
    "FusionConfig",
    "Gallery",
    "GalleryRecord",
    "MatchScore",
    "Minutia",
    "MinutiaMatchConfig",
    "MinutiaeMap",
    "MinutiaeSet",
    "PQIndex",
    "Template",
    "compress",
    "cosine_score",
    "decode_map",
    "decompress",
    "encode_map",
    "fused_verify",
    "integer_score",
    "minutiae_score",
    "orientation_diff",
    "pq_search_topk",
    "scale_set",
    "search_topk",
    "two_stage_search",
]
