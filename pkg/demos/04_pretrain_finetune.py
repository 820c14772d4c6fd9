"""A PT -> PT-C -> PT-C-C chain on a small synthetic corpus, one stage at a time."""

# %%
import tempfile

from olid_ensemble.config import RunConfig
from olid_ensemble.data import LabeledExample, dedup, threshold_label
from olid_ensemble.synthetic import generate
from olid_ensemble.tokenizer import build_vocab, encode
from olid_ensemble.training import CheckpointStore, run_stage, stage_spec

config = RunConfig.for_scale("smoke", seed=42)
corpus = generate(1500, seed=42)
solid, _ = dedup(corpus.solid)
vocab = build_vocab([t.text for t in corpus.olid_train + solid], 500)
store = CheckpointStore(tempfile.mkdtemp())


def rows(tweets, target):
    return [LabeledExample(t.id, encode(t.text, vocab, 64), target(t)) for t in tweets]


# %% masked-LM pretraining on SOLID text, selected by held-out perplexity
mlm = rows(solid, lambda t: None)
pt = run_stage(stage_spec(config, "PT", "A", None), mlm[:-100], mlm[-100:], store,
               config.encoder_config("A", len(vocab)))
print("PT perplexity per epoch", [round(p, 2) for p in pt.trace], "| vocab", len(vocab))

# %% distant classification on thresholded SOLID labels, then gold OLID labels
distant = rows(solid, threshold_label)
ptc = run_stage(stage_spec(config, "PT-C", "A", pt.checkpoint), distant[:-100], distant[-100:],
                store)
gold = rows(corpus.olid_train, lambda t: int(t.gold_label == "OFF"))
ptcc = run_stage(stage_spec(config, "PT-C-C", "A", ptc.checkpoint), gold[:-75], gold[-75:], store)
for res in (ptc, ptcc):
    print(res.name, "dev accuracy per epoch", [round(a, 1) for a in res.trace],
          "| parent", res.parent[:12])
