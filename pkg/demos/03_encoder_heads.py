"""Encoder variants, parameter counts, and head swaps that keep the encoder bits."""

# %%
import numpy as np

from olid_ensemble.encoder import (EncoderConfig, encode_sequence, init_model, parameter_count,
                                   sentence_representation, swap_head)
from olid_ensemble.rng import RngStream
from olid_ensemble.tokenizer import build_vocab, encode

# %% variant A has segment embeddings and static masking, variant B neither
vocab = build_vocab(["you are an idiot", "what a lovely day", "the coach is a clown"], 50)
for variant in "AB":
    cfg = EncoderConfig.for_variant(variant, hidden=32, layers=2, heads=4, ffn=64,
                                    vocab_size=len(vocab), max_positions=16)
    print(variant, cfg.masking_policy, "segments" if cfg.use_segment_embeddings else "no segments",
          parameter_count(cfg), "encoder parameters")

# %% the sentence representation is the [CLS] row of the last layer
model = init_model(cfg, RngStream(0), head="mlm")
hidden = encode_sequence(model, encode("you are a clown", vocab, 16))
print("hidden", hidden.shape, "representation", sentence_representation(hidden).shape)

# %% swapping the head re-initialises only the head
clf = swap_head(model, "classification", RngStream(1))
same = all(np.array_equal(clf[k].data, p.data) for k, p in model.encoder_parameters().items())
print("encoder preserved:", same, "| new head", clf["head.weight"].shape)
