"""Cross-attention masked language modeling laboratory."""

from ._veco import (
    BOS,
    MASK,
    PAD,
    SEP,
    UNK,
    Model,
    ModelConfig,
    Seq2Seq,
    average_checkpoints,
    bleu,
    lr_at,
    mask_row,
    smoothed_distribution,
    synth_pairs,
    __version__,
)

__all__ = [
    "BOS",
    "MASK",
    "PAD",
    "SEP",
    "UNK",
    "Model",
    "ModelConfig",
    "Seq2Seq",
    "average_checkpoints",
    "bleu",
    "lr_at",
    "mask_row",
    "smoothed_distribution",
    "synth_pairs",
    "__version__",
]
