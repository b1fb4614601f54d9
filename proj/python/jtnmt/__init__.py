"""Joint EM training of paired translation models."""

from ._jtnmt import (
    BOS,
    EOS,
    PAD,
    UNK,
    Model,
    corpus_bleu,
    default_config,
    evaluate,
    gen_data,
    joint_train,
    normalize_weights,
    pretrain,
    translate,
)

__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "UNK",
    "Model",
    "corpus_bleu",
    "default_config",
    "evaluate",
    "gen_data",
    "joint_train",
    "normalize_weights",
    "pretrain",
    "translate",
]
