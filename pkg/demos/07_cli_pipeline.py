"""The whole pipeline through the command line, at smoke scale in a scratch directory."""

# %%
import tempfile
from pathlib import Path

from olid_ensemble.cli import main

work = Path(tempfile.mkdtemp())

# %% synthetic data -> six individual models -> E / E_1 / E_2 -> report
main(["reproduce", "--workdir", str(work), "--scale", "smoke", "--seed", "42"])

# %% the lr x dropout grid over the same six members
main(["sweep", "--workdir", str(work), "--scale", "smoke", "--seed", "42"])

# %% everything lands under out/
for path in sorted((work / "out").iterdir()):
    print(path.name)
