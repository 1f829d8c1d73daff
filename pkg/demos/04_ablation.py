"""Short ablation over the five training presets."""
# %% [markdown]
# The presets switch terms on cumulatively:
#
# | preset        | real term | fake term | latent noise | generator term |
# |---------------|-----------|-----------|--------------|----------------|
# | baseline      | off       | off       | n/a          | off            |
# | +cr           | on        | off       | n/a          | off            |
# | +cf_vanilla   | on        | on        | off          | off            |
# | +cf           | on        | on        | on           | off            |
# | +cfg          | on        | on        | on           | on             |
#
# At 3000 steps and two seeds this is a smoke run, not a measurement: seed
# noise is comparable to the differences between presets at this budget.
# The acceptance suite runs the full 20k-step, five-seed version.  Expect
# roughly three minutes on one core.

# %%
import numpy as np

from insgen.config import RunConfig
from insgen.presets import PRESETS, apply_preset
from insgen.trainer import run

STEPS, SEEDS = 3000, (0, 1)
rows = []
for preset in PRESETS:
    finals = []
    for seed in SEEDS:
        cfg = apply_preset(RunConfig().override(
            [f"trainer.steps={STEPS}", f"trainer.seed={seed}", f"trainer.eval_every={STEPS}"]),
            preset)
        records, _ = run(cfg)
        finals.append(records[-1])
    rows.append((preset, np.median([r["frechet"] for r in finals]),
                 np.median([r["mode_coverage"] for r in finals])))
    print(f"{preset:12s} median frechet {rows[-1][1]:.4f}  median modes {rows[-1][2]:.1f}",
          flush=True)

# %% [markdown]
# The same sweep is available from the command line, with per-run outputs
# and a summary table:
#
#     insgen ablate --preset baseline +cr +cf_vanilla +cf +cfg --seeds 0 1 \
#         --set trainer.steps=3000 --out runs/ablation
