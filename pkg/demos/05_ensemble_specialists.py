"""Two specialists that each see one offensive cue, combined by a trained linear decoder."""

# %%
from olid_ensemble.workflow import specialization_experiment

# %% members are fine-tuned jointly with the decoder
joint = specialization_experiment(n=600, seed=42)
print("member dev accuracy", [round(a, 2) for a in joint.member_accuracy])
print("ensemble dev accuracy", round(joint.ensemble_accuracy, 2))

# %% with frozen members only the decoder moves
frozen = specialization_experiment(n=600, seed=42, freeze_members=True)
print("frozen ensemble", round(frozen.ensemble_accuracy, 2),
      "| member checksums unchanged:", frozen.checksums_before == frozen.checksums_after)
