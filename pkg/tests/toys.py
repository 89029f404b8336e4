"""Tiny model/corpus builders shared across test modules."""

import numpy as np

from muteasr.corpus import CorpusSpec, Utterance, Vocabulary
from muteasr.model import LasModel, ModelConfig


def toy_config(variant="baseline", n_content=4, **overrides):
    base = dict(
        vocab_size=n_content + 3,
        feature_dim=3,
        conv_layers=1,
        conv_channels=4,
        encoder_layers=1,
        encoder_hidden=3,
        decoder_layers=2,
        decoder_hidden=8,
        embed_dim=8,
        attention_dim=4,
        variant=variant,
        text_split=1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_model(variant="baseline", seed=0, n_content=4, **overrides):
    return LasModel(
        toy_config(variant, n_content=n_content, **overrides),
        Vocabulary.default(n_content),
        seed=seed,
    )


def toy_utterance(rng, t=7, f=3, n_content=4, u=3, ident="u"):
    return Utterance(
        id=ident,
        features=rng.normal(size=(t, f)),
        transcript=list(rng.integers(3, 3 + n_content, size=u)),
    )


def small_corpus_spec(**overrides):
    base = dict(seed=5, train_size=16, val_size=6, test_size=6, text_size=80, feature_dim=4)
    base.update(overrides)
    return CorpusSpec(**base)
