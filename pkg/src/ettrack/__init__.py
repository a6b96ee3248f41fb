"""Exemplar-attention tracking head on CPU, in numpy with a compiled kernel core."""
from .attention import (
    ExemplarAttentionParams,
    StandardAttentionParams,
    TransformerLayerParams,
    Variant,
    exemplar_attention_efficient,
    exemplar_attention_reference,
    init_exemplar_attention,
    init_transformer_layer,
    similarity,
    transformer_layer,
)
from .config import ConfigError, RunConfig
from .head import HeadKind, HeadParams, PenaltyConfig, conv_head_to_exemplar, head_forward, init_head
from .kernels import BACKEND
from .pipeline import BackboneKind, TrackerConfig, TrackerParams, init, init_backbone, track_sequence, update
from .tensor import ShapeError
from .weights import WeightsFormatError, load_weights, save_weights

__version__ = "0.1.0"
