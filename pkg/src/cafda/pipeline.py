"""Training workflow: working-independence fit, FPCA per segment, final fit."""

from __future__ import annotations

import logging

from .dataset import FunctionalDataset, filter_usable_days
from .errors import EmptyDataError
from .famm import FittedModel, ModelSpec, fit_stage1, fit_stage2
from .fpca import GRID_SIZE, SURFACE_BASIS, fpca

log = logging.getLogger(__name__)


def train(spec: ModelSpec, ds: FunctionalDataset, *, min_points=1, grid_size=GRID_SIZE,
          surface_basis=SURFACE_BASIS, selection="gcv") -> FittedModel:
    """Fit ``spec`` to Phase-I data.

    Days with fewer than ``min_points`` complete observations are dropped
    first. ``selection`` picks how the covariance smoother chooses its
    smoothing parameter (see :func:`cafda.fpca.smooth_covariance`). With
    segments, FPCA runs separately on each segment's residuals while the
    fixed effects are shared.
    """
    if min_points > 1:
        ds = filter_usable_days(ds, min_points, spec.covariates)
    stage1 = fit_stage1(spec, ds)
    res = stage1.residuals
    eigs = []
    for seg in range(spec.n_segments):
        keep = [i for i, d in enumerate(res.day_ids) if spec.segment_of(d) == seg]
        if not keep:
            log.warning("segment %d has no training days", seg)
            continue
        eig = fpca(res.subset(keep), spec.pve_threshold, grid_size=grid_size, num_basis=surface_basis,
                   selection=selection)
        eigs.append(eig)
    if len(eigs) != spec.n_segments:
        raise EmptyDataError("every segment needs training days")
    model = fit_stage2(spec, ds, eigs, stage1)
    log.info("trained: R2=%.3f m=%s", model.diagnostics["r2"], [e.m for e in eigs])
    return model
