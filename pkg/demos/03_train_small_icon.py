"""
Training a small operator network
=================================

A few hundred steps on a small exponential-kernel dataset are enough to
see the relative error fall.  The reproduction runs 20,000 steps.
"""

from iconexec.datagen import TrajectoryBank, generate_dataset
from iconexec.grid import TimeGrid
from iconexec.icon import IconConfig, IconTrainConfig, train_icon

grid = TimeGrid(1.0, 100)
train = TrajectoryBank.from_records(generate_dataset("ode", 200, grid=grid, seed=0))
test = TrajectoryBank.from_records(generate_dataset("ode", 20, grid=grid, seed=1))

cfg = IconTrainConfig(steps=300, eval_every=50, n_eval_prompts=20)
model, hist = train_icon(train, grid, IconConfig(n_layers=2, d_model=32), cfg, seed=0, test_bank=test)
for step, loss, tr, te in hist.rows():
    print(f"step {step:4d}  loss {loss:.3e}  train rel {tr:.3f}  test rel {te:.3f}")
