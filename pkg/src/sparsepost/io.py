"""CSV readers/writers and JSON run manifests."""

from __future__ import annotations

import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ValidationError


def read_matrix(path, allow_missing=False):
    """CSV with a header of column ids and one row per subject."""
    df = pd.read_csv(path, na_values=["NA", "na", ""], keep_default_na=True)
    if df.empty:
        raise ValidationError(f"{path}: no rows")
    try:
        values = df.to_numpy(dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entries ({exc})") from None
    if not allow_missing and np.isnan(values).any():
        raise ValidationError(f"{path}: missing values are not allowed here")
    return values, [str(c) for c in df.columns]


def write_matrix(path, values, columns):
    pd.DataFrame(np.asarray(values), columns=list(columns)).to_csv(path, index=False)


def read_metadata(path):
    meta = pd.read_csv(path, dtype={"variant_id": str, "chromosome": str, "gene": str,
                                    "consequence": str})
    if "variant_id" not in meta:
        raise ValidationError(f"{path}: metadata needs a variant_id column")
    return meta


def read_groups(path, variant_ids):
    """Group map CSV (variant_id, group_id) -> dense integer ids aligned with ``variant_ids``."""
    df = pd.read_csv(path, dtype={"variant_id": str, "group_id": str})
    if not {"variant_id", "group_id"} <= set(df.columns):
        raise ValidationError(f"{path}: needs variant_id and group_id columns")
    lookup = dict(zip(df["variant_id"], df["group_id"]))
    missing = [v for v in variant_ids if v not in lookup]
    if missing:
        raise ValidationError(f"{path}: no group for variants {missing[:5]}")
    labels = [lookup[v] for v in variant_ids]
    # numbered in order of first appearance
    first = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = first.setdefault(lab, len(first))
    return out


def write_groups(path, variant_ids, groups):
    pd.DataFrame({"variant_id": variant_ids, "group_id": np.asarray(groups)}).to_csv(path, index=False)


def versions():
    import numba
    import scipy
    from . import __version__
    return {"sparsepost": __version__, "python": sys.version.split()[0],
            "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
            "numba": numba.__version__, "platform": platform.platform()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if not callable(v)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return None if np.isnan(obj) else float(obj)
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_manifest(path, command, config, extra=None):
    doc = {"command": command, "created": datetime.now(timezone.utc).isoformat(),
           "config": config, "versions": versions()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True))
    return doc
