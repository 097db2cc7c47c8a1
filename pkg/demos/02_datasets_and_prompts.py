"""
Synthetic data and in-context prompts
=====================================

Draw random kernels, GP trading rates and the resulting impact paths, and
look at how a prompt is laid out as tokens.
"""

import numpy as np

from iconexec.datagen import generate_dataset
from iconexec.grid import TimeGrid
from iconexec.icon import make_prompt, tokenize

grid = TimeGrid(1.0, 100)
records = list(generate_dataset("all3", 6, traj_per_theta=6, grid=grid, seed=0))
for rec in records:
    print(rec.theta.to_json(), " max|Y| = %.4f" % np.abs(rec.ys).max())

# %%
# Five examples from one kernel plus a question rate.  Example grids are
# thinned to every 4th node; the question and the queries keep all nodes.
rec = records[0]
prompt = make_prompt(grid, rec.us[:5], rec.ys[:5], rec.us[5], example_stride=4)
tok = tokenize(prompt)
print("tokens:", tok.features.shape, " mask:", tok.mask.shape)
print("attended pairs:", int(tok.mask.sum()), "of", tok.mask.size)
