"""Plain-text fit artifacts: one matrix per file plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from qcf.errors import InputError
from qcf.estimator import QCFResult
from qcf.factors import FactorEstimate
from qcf.sieve import build_basis

MANIFEST = "manifest.json"
MATRICES = ("F", "Gamma", "theta", "b", "Psi", "V")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def save_result(result: QCFResult, outdir, extra: dict | None = None) -> Path:
    """Write F, Gamma, theta (r x d), b (m x r), Psi, V and the manifest.

    ``%.18e`` keeps every float64 bit, so a reload reproduces metrics exactly.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mats = {"F": result.F, "Gamma": result.Gamma, "theta": result.theta, "b": result.b, "Psi": result.Psi, "V": result.factors.V}
    shapes = {}
    for name, arr in mats.items():
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        np.savetxt(outdir / f"{name}.txt", arr, fmt="%.18e")
        shapes[name] = list(arr.shape)
    manifest = {
        "model": "qcf",
        "tau": result.tau,
        "r": result.r,
        "m": result.m,
        "d": result.basis.d,
        "ridge": result.ridge,
        "recovery_degree": result.recovery_degree,
        "b_recovered": None if result.b_recovered is None else np.asarray(result.b_recovered).tolist(),
        "periods": [_jsonable(p) for p in result.periods],
        "factor_flags": list(result.factors.flags),
        "flags": list(result.flags),
        "shapes": shapes,
    }
    if extra:
        manifest.update({k: _jsonable(v) for k, v in extra.items()})
    (outdir / MANIFEST).write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return outdir


def _load(outdir: Path, name: str, shape) -> np.ndarray:
    arr = np.loadtxt(outdir / f"{name}.txt", ndmin=2)
    return arr.reshape(shape)


def load_result(outdir) -> tuple[QCFResult, dict]:
    outdir = Path(outdir)
    path = outdir / MANIFEST
    if not path.exists():
        raise InputError(f"{path}: no fit manifest")
    man = json.loads(path.read_text())
    shapes = man["shapes"]
    arr = {name: _load(outdir, name, shapes[name]) for name in MATRICES}
    basis = build_basis(int(man["m"]), int(man["d"]))
    factors = FactorEstimate(F=arr["F"], Gamma=arr["Gamma"], V=arr["V"].ravel(), flags=tuple(man["factor_flags"]))
    b_rec = man.get("b_recovered")
    result = QCFResult(
        tau=float(man["tau"]),
        r=int(man["r"]),
        m=int(man["m"]),
        ridge=float(man["ridge"]),
        basis=basis,
        Psi=arr["Psi"],
        factors=factors,
        theta=arr["theta"],
        b=arr["b"],
        recovery_degree=list(man["recovery_degree"]),
        b_recovered=None if b_rec is None else np.asarray(b_rec, dtype=float),
        periods=tuple(man["periods"]),
        flags=list(man["flags"]),
    )
    return result, man
