"""Confusion matrices, macro scores, and a case where accuracy and macro-F1 disagree."""

# %%
from olid_ensemble.evaluation import (DIVERGENCE_EXAMPLE, ConfusionMatrix, confusion, metrics,
                                      render_confusion)

# %% rows are gold, columns predicted
cm = ConfusionMatrix(((1, 1), (0, 2)))
m = metrics(cm)
print(render_confusion(cm))
print(f"accuracy {m.accuracy:.3f}  macro P {m.macro_precision:.3f}  "
      f"macro R {m.macro_recall:.3f}  macro F1 {m.macro_f1:.3f}")

# %% always predicting the majority class wins on accuracy and loses on macro-F1
gold = DIVERGENCE_EXAMPLE["gold"]
for name in ("majority", "recall_oriented"):
    s = metrics(confusion(gold, DIVERGENCE_EXAMPLE[name]))
    print(f"{name:<16} accuracy {s.accuracy:5.1f}  macro F1 {s.macro_f1:.3f}")
