"""Text archive of a trained model and its chart calibrations.

The archive is a JSON document. Floats are written with Python's shortest
round-trip representation, so loading reproduces every coefficient
exactly and the file does not depend on locale or platform.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchiveError
from .famm import FittedModel, ModelSpec, TermBasis, _day_json, _day_parse
from .fpca import EigenSystem
from .mewma import Calibration

FORMAT = "cafda-model"
VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclass(frozen=True, eq=False)
class ModelArchive:
    """A fitted model plus thresholds keyed by ``(lam, rho)``."""

    model: FittedModel
    calibrations: dict = field(default_factory=dict)

    def threshold(self, lam, rho=0):
        try:
            return self.calibrations[(float(lam), int(rho))]
        except KeyError:
            raise KeyError(f"no calibration for lambda={lam}, rho={rho}") from None

    def with_calibration(self, rho, cal: Calibration) -> "ModelArchive":
        cals = dict(self.calibrations)
        cals[(float(cal.lam), int(rho))] = cal
        return ModelArchive(self.model, cals)


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def to_dict(arch: ModelArchive) -> dict:
    m = arch.model
    return {
        "format": FORMAT,
        "version": VERSION,
        "spec": m.spec.to_dict(),
        "terms": [
            {"basis": tb.to_dict(), "coefficients": _arr(c), "lambdas": [float(x) for x in lam], "edf": float(e)}
            for tb, c, lam, e in zip(m.term_bases, m.coefficients, m.lambdas, m.edf)
        ],
        "eigensystems": [e.to_dict() for e in m.eigensystems],
        "phase1_scores": [[_day_json(d), _arr(v)] for d, v in m.scores.items()],
        "diagnostics": {k: float(v) if isinstance(v, (float, np.floating)) else v for k, v in m.diagnostics.items()},
        "fingerprint": dict(m.fingerprint),
        "calibrations": [
            {"rho": rho, **cal.to_dict()}
            for (lam, rho), cal in sorted(arch.calibrations.items())
        ],
    }


def from_dict(d) -> ModelArchive:
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise ArchiveError("not a model archive")
    if d.get("version") not in SUPPORTED_VERSIONS:
        raise ArchiveError(f"unsupported archive version {d.get('version')!r}; supported: {SUPPORTED_VERSIONS}")
    try:
        spec = ModelSpec.from_dict(d["spec"])
        terms = d["terms"]
        model = FittedModel(
            spec,
            tuple(TermBasis.from_dict(t["basis"]) for t in terms),
            tuple(np.array(t["coefficients"], dtype=float) for t in terms),
            tuple(tuple(t["lambdas"]) for t in terms),
            tuple(float(t["edf"]) for t in terms),
            tuple(EigenSystem.from_dict(e) for e in d["eigensystems"]),
            {_day_parse(k): np.array(v, dtype=float) for k, v in d.get("phase1_scores", [])},
            dict(d.get("diagnostics", {})),
            dict(d.get("fingerprint", {})),
        )
        cals = {}
        for c in d.get("calibrations", []):
            cal = Calibration.from_dict(c)
            cals[(cal.lam, int(c.get("rho", 0)))] = cal
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ArchiveError(f"malformed archive: {exc}") from exc
    if len(model.term_bases) != len(spec.terms):
        raise ArchiveError("archive terms do not match its model spec")
    for tb, c in zip(model.term_bases, model.coefficients):
        if c.shape != (tb.ncol,):
            raise ArchiveError(f"term {tb.term.label}: {c.size} coefficients for {tb.ncol} columns")
    return ModelArchive(model, cals)


def dumps(arch: ModelArchive) -> str:
    return json.dumps(to_dict(arch), indent=1, sort_keys=False) + "\n"


def save_model(arch, path):
    """Write atomically: a crash never leaves a half-written archive at ``path``."""
    if isinstance(arch, FittedModel):
        arch = ModelArchive(arch)
    path = Path(path)
    text = dumps(arch)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_model(path) -> ModelArchive:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ArchiveError(f"archive {path} not found") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupt or truncated archive {path}: {exc}") from exc
    return from_dict(d)
