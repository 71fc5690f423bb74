"""Plot-ready summaries of a trained model, written as CSV and JSON."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .famm import DAY_OF_YEAR, TIME, FittedModel

GRID_1D = 101
GRID_2D = 41


def _axis(basis, n):
    return np.linspace(basis.lo, basis.hi, n)


def term_grid(model: FittedModel, n1=GRID_1D, n2=GRID_2D):
    """Rows ``(term, x1, x2, value)`` evaluating every smooth and linear term on a grid.

    One-dimensional terms leave ``x2`` empty. Linear terms are evaluated
    over the observed range stored in the training fingerprint when
    available, else over ``[0, 1]``.
    """
    rows = []
    for tb, coef in zip(model.term_bases, model.coefficients):
        term = tb.term
        if term.kind == "constant_intercept":
            rows.append((term.label, "", "", float(coef[0])))
            continue
        if term.kind == "linear":
            lo, hi = model.fingerprint.get("ranges", {}).get(term.variables[0], (0.0, 1.0))
            x = np.linspace(lo, hi, n1)
            rows += [(term.label, v, "", float(c)) for v, c in zip(x, x * coef[0])]
            continue
        if len(tb.bases) == 1:
            x = _axis(tb.bases[0], n1)
            vals = tb.design(_cols(term.variables, [x]), clamp=False) @ coef
            rows += [(term.label, a, "", b) for a, b in zip(x, vals)]
        else:
            x1 = _axis(tb.bases[0], n2)
            x2 = _axis(tb.bases[1], n2)
            g1, g2 = (a.ravel() for a in np.meshgrid(x1, x2, indexing="ij"))
            vals = tb.design(_cols(term.variables, [g1, g2]), clamp=False) @ coef
            rows += [(term.label, a, b, c) for a, b, c in zip(g1, g2, vals)]
    return rows


def _cols(variables, values):
    n = values[0].size
    cols = {TIME: np.zeros(n), DAY_OF_YEAR: np.zeros(n)}
    cols.update(dict(zip(variables, values)))
    return cols


def _num(v):
    return v if v == "" else repr(float(v))


def write_term_grid(model, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "x1", "x2", "value"])
        for label, a, b, v in term_grid(model):
            w.writerow([label, _num(a), _num(b), _num(v)])


def write_eigenfunctions(model, path):
    """Long format ``segment, component, t, phi`` for every segment's eigensystem."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "component", "t", "phi"])
        for s, eig in enumerate(model.eigensystems):
            for r in range(eig.m):
                for t, v in zip(eig.grid, eig.eigenfunctions[r]):
                    w.writerow([s, r + 1, repr(float(t)), repr(float(v))])


def write_scores(scores, path):
    """Rows ``day_id, n_points, method, xi_1..xi_m`` for :class:`ScoreVector` items or a dict."""
    items = list(scores.items()) if isinstance(scores, dict) else [(s.day_id, s) for s in scores]
    m = max((len(getattr(v, "values", v)) for _, v in items), default=0)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day_id", "n_points", "method", *[f"xi_{r + 1}" for r in range(m)]])
        for day, v in items:
            vals = getattr(v, "values", v)
            day = day.isoformat() if hasattr(day, "isoformat") else day
            w.writerow([day, getattr(v, "n_points", ""), getattr(v, "method", "stage2"),
                        *[repr(float(x)) for x in vals]])


def summary(model: FittedModel) -> dict:
    """R2, number of components, PVE, eigenvalues, noise variance and per-term edf."""
    return {
        "r2": model.diagnostics.get("r2"),
        "n_obs": model.diagnostics.get("n_obs"),
        "n_days": model.diagnostics.get("n_days"),
        "alpha0": model.alpha0,
        "segments": [
            {"m": e.m, "pve": e.pve, "eigenvalues": e.eigenvalues.tolist(), "sigma2": e.sigma2}
            for e in model.eigensystems
        ],
        "terms": [
            {"term": str(tb.term), "edf": float(edf), "lambdas": [float(x) for x in lam]}
            for tb, edf, lam in zip(model.term_bases, model.edf, model.lambdas)
        ],
        "fingerprint": model.fingerprint,
    }


def write_model_report(model: FittedModel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_report.json").write_text(json.dumps(summary(model), indent=1) + "\n", encoding="utf-8")
    write_term_grid(model, out / "terms.csv")
    write_eigenfunctions(model, out / "eigenfunctions.csv")
    write_scores(model.scores, out / "phase1_scores.csv")
