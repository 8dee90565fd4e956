"""CSV and fit-document I/O, atomic writes, and run manifests.

The data schema (see SCHEMA.md): header row required, columns ``study_id``,
``x``, ``sigma`` mandatory, ``cluster_id``, ``xr``, ``sigmar`` optional,
anything else numeric is carried as a covariate.  Empty string means missing.
All numeric output is serialized with 17 significant digits so re-reading
loses nothing.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .estimate import ModelFit, _Transform, _effect_layout, _effect_param_values
from .likelihood import ModelSpec
from .model import (
    EffectDistribution,
    GammaAbs,
    InputError,
    Normal,
    PointMass,
    SelectionFunction,
    StudyRecord,
    TLocationScale,
)

__all__ = [
    "read_study_csv",
    "write_csv_atomic",
    "write_text_atomic",
    "fit_to_document",
    "fit_from_document",
    "RunManifest",
    "write_manifest",
    "TOOL_VERSION",
]

TOOL_VERSION = "0.1.0"

REQUIRED_COLUMNS = ("study_id", "x", "sigma")
OPTIONAL_COLUMNS = ("cluster_id", "xr", "sigmar")


def read_study_csv(path: str, sign_normalized: bool = False,
                   cluster_column: Optional[str] = None) -> list[StudyRecord]:
    """Read the study CSV schema into records, reporting offending lines."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise InputError(f"data file not found: {path}")
    except Exception as exc:
        raise InputError(f"cannot parse {path}: {exc}")
    for col in REQUIRED_COLUMNS:
        if col not in frame.columns:
            raise InputError(f"{path}: missing required column {col!r}")
    if cluster_column is not None and cluster_column not in frame.columns:
        raise InputError(f"{path}: missing cluster column {cluster_column!r}")

    known = set(REQUIRED_COLUMNS) | set(OPTIONAL_COLUMNS)
    covariate_cols = [c for c in frame.columns if c not in known]

    def parse_float(raw: str, col: str, line: int, required: bool) -> Optional[float]:
        if raw == "":
            if required:
                raise InputError(f"{path}:{line}: empty value in column {col!r}")
            return None
        try:
            return float(raw)
        except ValueError:
            raise InputError(
                f"{path}:{line}: cannot parse {col!r} value {raw!r} as a number"
            )

    records = []
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + 2  # header is line 1
        row = row._asdict() if hasattr(row, "_asdict") else dict(zip(frame.columns, row))
        x = parse_float(row["x"], "x", line, required=True)
        sigma = parse_float(row["sigma"], "sigma", line, required=True)
        xr = parse_float(row.get("xr", ""), "xr", line, required=False)
        sigmar = parse_float(row.get("sigmar", ""), "sigmar", line, required=False)
        covariates = {}
        for col in covariate_cols:
            val = row[col]
            if val == "":
                continue
            try:
                covariates[col] = float(val)
            except ValueError:
                continue  # non-numeric extras are not covariates
        cluster_src = cluster_column or "cluster_id"
        cluster = row.get(cluster_src, "") or row["study_id"]
        try:
            records.append(StudyRecord(
                study_id=row["study_id"],
                cluster_id=str(cluster),
                x=x,
                sigma=sigma,
                xr=xr,
                sigmar=sigmar,
                covariates=covariates,
                sign_normalized=sign_normalized,
            ))
        except InputError as exc:
            raise InputError(f"{path}:{line}: {exc}")
    if not records:
        raise InputError(f"{path}: no data rows")
    return records


def _atomic_write(path: str, payload: str):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: str, payload: str):
    _atomic_write(path, payload)


def write_csv_atomic(path: str, frame: pd.DataFrame):
    payload = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    _atomic_write(path, payload)


# ---------------------------------------------------------------------------
# Fit documents
# ---------------------------------------------------------------------------

_EFFECT_TAGS = {
    GammaAbs: "gamma",
    TLocationScale: "t",
    Normal: "normal",
    PointMass: "point",
}


def _effect_to_json(effect: EffectDistribution) -> dict:
    tag = _EFFECT_TAGS.get(type(effect))
    if tag is None:
        raise InputError(f"cannot serialize effect family {type(effect).__name__}")
    return {"family": tag, "params": [float(v) for v in _effect_param_values(effect)]}


def _effect_from_json(doc: dict) -> EffectDistribution:
    family = doc["family"]
    params = doc["params"]
    if family == "gamma":
        return GammaAbs(shape=params[0], scale=params[1])
    if family == "t":
        return TLocationScale(loc=params[0], scale=params[1], df=params[2])
    if family == "normal":
        return Normal(loc=params[0], scale=params[1])
    if family == "point":
        return PointMass(loc=params[0])
    raise InputError(f"unknown effect family {family!r}")


def fit_to_document(fit: ModelFit, sign_normalized: bool) -> str:
    """Serialize a fit as a JSON document (parameters, SEs, vcov, diagnostics)."""
    sel = fit.spec.selection
    se = fit.se
    doc = {
        "tool_version": TOOL_VERSION,
        "kind": fit.spec.kind,
        "sign_normalized": bool(sign_normalized),
        "selection": {
            "cutoffs": list(sel.cutoffs),
            "coefficients": list(sel.coefficients),
            "reference_cell": sel.reference_cell,
            "symmetric": sel.symmetric,
        },
        "effect": _effect_to_json(fit.spec.effect),
        "latent_gamma": list(fit.spec.latent_gamma) if fit.spec.latent_gamma else None,
        "parameters": [
            {
                "name": name,
                "estimate": float(est),
                "se": None if se is None else float(se[i]),
            }
            for i, (name, est) in enumerate(zip(fit.param_names, fit.theta_hat))
        ],
        "vcov": None if fit.vcov is None else [[float(v) for v in row] for row in fit.vcov],
        "loglik": float(fit.loglik),
        "converged": bool(fit.converged),
        "n_restarts_used": int(fit.n_restarts_used),
        "gradient_norm": float(fit.gradient_norm),
        "n_obs": int(fit.n_obs),
        "n_nodes": int(fit.n_nodes),
        "free_cells": list(fit._free_cells),
        "pinned_cells": list(fit._pinned_cells),
        "notes": list(fit.notes),
    }
    return json.dumps(doc, indent=2) + "\n"


def fit_from_document(path: str) -> tuple[ModelFit, bool]:
    """Rebuild a ModelFit (and its sign-normalization flag) from a JSON document."""
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except FileNotFoundError:
        raise InputError(f"fit document not found: {path}")
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid fit document: {exc}")
    sel_doc = doc["selection"]
    selection = SelectionFunction(
        cutoffs=tuple(sel_doc["cutoffs"]),
        coefficients=tuple(sel_doc["coefficients"]),
        reference_cell=int(sel_doc["reference_cell"]),
        symmetric=bool(sel_doc["symmetric"]),
    )
    effect = _effect_from_json(doc["effect"])
    gamma = doc.get("latent_gamma")
    spec = ModelSpec(
        kind=doc["kind"],
        selection=selection,
        effect=effect,
        latent_gamma=tuple(gamma) if gamma else None,
    )
    names = tuple(p["name"] for p in doc["parameters"])
    theta = np.array([p["estimate"] for p in doc["parameters"]], dtype=float)
    eff_names, eff_kinds = _effect_layout(effect)
    kinds = list(eff_kinds) + ["log"] * len(doc["free_cells"])
    kinds += ["identity"] * max(0, len(names) - len(kinds))
    fit = ModelFit(
        spec=spec,
        theta_hat=theta,
        param_names=names,
        vcov=None if doc["vcov"] is None else np.array(doc["vcov"], dtype=float),
        loglik=float(doc["loglik"]),
        converged=bool(doc["converged"]),
        n_restarts_used=int(doc["n_restarts_used"]),
        gradient_norm=float(doc["gradient_norm"]),
        n_obs=int(doc["n_obs"]),
        n_nodes=int(doc["n_nodes"]),
        notes=tuple(doc.get("notes", ())),
        _transform=_Transform(names, tuple(kinds)),
        _free_cells=tuple(doc["free_cells"]),
        _pinned_cells=tuple(doc["pinned_cells"]),
    )
    return fit, bool(doc.get("sign_normalized", False))


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: Optional[int]
    input_digests: dict
    outputs: list
    tool_version: str
    wall_time_s: float
    threads_env: Optional[str] = None


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_path: str,
    command: str,
    config: dict,
    inputs: Sequence[str],
    outputs: Sequence[str],
    seed: Optional[int],
    started: float,
):
    config_blob = json.dumps(config, sort_keys=True, default=str)
    manifest = RunManifest(
        command=command,
        config_digest=hashlib.sha256(config_blob.encode()).hexdigest(),
        seed=seed,
        input_digests={p: _sha256_file(p) for p in inputs if os.path.exists(p)},
        outputs=list(outputs),
        tool_version=TOOL_VERSION,
        wall_time_s=time.time() - started,
        threads_env=os.environ.get("PUBSEL_THREADS"),
    )
    path = out_path + ".manifest.json"
    write_text_atomic(path, json.dumps(asdict(manifest), indent=2) + "\n")
    return path
