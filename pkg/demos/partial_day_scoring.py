"""Score a day while it is still in progress.

The conditional-mean scores only need the points seen so far, so a chart
can be updated every hour. Early in the day the estimate is pulled toward
zero and sharpens as observations arrive. Integration needs a nearly
complete day and refuses sparse ones.
"""

import numpy as np

from cafda import simgen
from cafda.dataset import DayProfile
from cafda.errors import DensityError
from cafda.famm import ModelSpec
from cafda.pipeline import train
from cafda.scores import day_scores

cfg = simgen.DgpConfig(seed=2)
model = train(ModelSpec(simgen.BASIC_SPEC), simgen.generate_phase1(cfg))

day, truth = simgen.generate_phase2_day(cfg, rng=np.random.default_rng(9), return_truth=True)
# Estimated eigenfunctions are only defined up to sign; express the truth in their orientation.
eig = model.eigensystem
phi_true = simgen.legendre_eigenfunctions(eig.grid)
signs = np.sign((eig.eigenfunctions[:3] * eig.weights) @ phi_true.T).diagonal()
print(f"components kept: {model.m}")
print(f"true scores of the day (estimated orientation): {np.round(signs * truth.scores[0], 3)}")
print("hours seen   estimated scores")
for hours in (2, 4, 8, 12, 18, 24):
    seen = DayProfile(day.day_id, day.t[:hours], day.u[:hours], {"z": day.covariates["z"][:hours]})
    sv = day_scores(model, seen)
    print(f"{hours:10d}   {np.round(sv.values, 3)}")

try:
    day_scores(model, DayProfile(day.day_id, day.t[:8], day.u[:8], {"z": day.covariates["z"][:8]}),
               method="integration")
except DensityError as exc:
    print(f"integration on 8 hours: {exc}")
print(f"integration on the full day: {np.round(day_scores(model, day, method='integration').values, 3)}")
