"""Synthetic corpus, dedup, confidence thresholding, and split sizes at full table scale."""

# %%
from olid_ensemble import data as D
from olid_ensemble.synthetic import generate

# %% a desk corpus: OLID-shaped gold tweets plus SOLID-shaped confidence rows
corpus = generate(2000, dup_rate=0.01, off_rate=0.33, seed=42)
print(len(corpus.olid_train), "olid train /", len(corpus.olid_test), "olid test /",
      len(corpus.solid), "solid rows")
print(corpus.solid[0])

# %% exact-text duplicates go, first occurrence wins
kept, removed = D.dedup(corpus.solid)
print("removed", removed, "duplicates")

# %% distant labels: OFF only when the mean confidence is strictly above 0.5
for conf in (0.215, 0.5, 0.691):
    print(conf, "->", D.LABELS[D.threshold_label(D.RawTweet("x", "", avg_conf=conf))])

# %% the planner's arithmetic on the full-size source counts
sizes = D.SourceSizes(olid_train=13_240, olid_test=860, solid_raw=9_089_140,
                      solid_dedup=8_996_730, task_test=3_887)
for stage in D.STAGES:
    print(f"{stage:<7}", D.plan_counts(D.SplitPlan(stage), sizes))

# %% and an actual split on the desk corpus
split = D.make_split(D.SplitPlan("PT-C-C"), corpus.olid_train, corpus.olid_test, corpus.solid)
print("PT-C-C train/dev", len(split.train), len(split.dev))
