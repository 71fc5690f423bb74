"""Train on simulated in-control days, then watch a chart catch a shift.

Run with ``python demos/simulated_monitoring.py``. Takes a few seconds.
"""

import numpy as np

from cafda import simgen
from cafda.famm import ModelSpec
from cafda.mewma import ChartConfig, calibrate_h4, monitor_stream
from cafda.pipeline import train
from cafda.scores import day_scores

# 300 training days: hourly output driven by a daily covariate profile z,
# plus a random day-level curve and white noise.
cfg = simgen.DgpConfig(seed=1)
phase1 = simgen.generate_phase1(cfg)
model = train(ModelSpec(simgen.BASIC_SPEC), phase1)

print(f"R^2 of the fixed effects: {model.diagnostics['r2']:.3f}")
print(f"components kept: {model.m}, eigenvalues {np.round(model.eigenvalues, 3)}, "
      f"noise variance {model.sigma2:.3f}")
print(f"true eigenvalues:        {np.round(cfg.eigenvalues, 3)}, noise variance {cfg.sigma2}")

# The covariate effect is steep for small z and flat above z = 3.
f_hat = model.smooth_function("smooth(z)")
z = np.linspace(-1.0, 4.0, 6)
offset = model.alpha0 - cfg.alpha0
print("z        " + " ".join(f"{v:7.2f}" for v in z))
print("f(z)     " + " ".join(f"{v:7.3f}" for v in simgen.f_true(z)))
print("f_hat(z) " + " ".join(f"{v:7.3f}" for v in f_hat(z) + offset))

# Chart with lambda = 0.3 calibrated to one false alarm per 370 days on average.
lam = 0.3
cal = calibrate_h4(model.m, lam, 370.4, reps=50_000, seed=0)
chart = ChartConfig(lam, model.eigenvalues, cal.h4)
print(f"\nthreshold h4 = {cal.h4:.3f} (Monte Carlo ARL {cal.arl:.0f} +- {cal.se:.0f})")

# 40 normal days, then the level of the daily curve jumps by 1.5 from day 41 on.
stream = simgen.generate_phase2(cfg, 60, simgen.ShiftSpec(r=1, delta=1.5, tau=41), seed=5)
trace = monitor_stream(chart, [day_scores(model, day) for day in stream])
print(f"first alarm on day {trace.run_length} (shift starts on day 41)")
for g, t2, hit in zip(trace.g[35:50], trace.t2[35:50], trace.alarmed[35:50]):
    print(f"  day {g:2d}  T2 = {t2:7.2f}{'  ALARM' if hit else ''}")
