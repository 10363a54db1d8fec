"""Neural layers and the composite blocks built on :mod:`accentconv.autodiff`."""

from .module import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    ShapeMismatchError,
    const_param,
    uniform_param,
)
from .blocks import (
    PAPER,
    PRESETS,
    TOY,
    AttentivePoolingDecoder,
    BlockPreset,
    Condition,
    ConformerBlock,
    FFTBlock,
    FFTStack,
    JasperBlock,
    JasperStack,
    MultiHeadAttention,
    SincConv,
    SincFrontEnd,
    Subsample4,
    Upsample4,
    XVectorStack,
    get_preset,
    sinusoidal_positions,
)
