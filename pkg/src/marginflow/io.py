"""On-disk formats for trajectories, analysis rows and run manifests.

records.csv
    One row per recorded iteration, columns in :data:`RECORD_FIELDS` order,
    floats written with 17 significant digits.
snapshots.npz
    Arrays ``k``, ``w``, ``w_next``, ``batch`` (one row per snapshot) and
    ``final_w``.
config.json
    Echo of the experiment configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .optimizer import RECORD_FIELDS, ExperimentConfig, Snapshot, StepRecord, Trajectory, detect_separation


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return f"{float(v):.17g}"


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) for v in row])


def write_records_csv(records, path):
    write_rows(path, RECORD_FIELDS, ([getattr(r, f) for f in RECORD_FIELDS] for r in records))


def read_records_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        for row in rd:
            vals = {f: float(row[f]) for f in RECORD_FIELDS}
            vals["k"] = int(row["k"])
            out.append(StepRecord(**vals))
    return out


def save_trajectory(traj: Trajectory, outdir) -> dict:
    """Write records, snapshots and the config echo; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": outdir / "records.csv",
        "snapshots": outdir / "snapshots.npz",
        "config": outdir / "config.json",
    }
    write_records_csv(traj.records, paths["records"])
    snaps = traj.snapshots
    d = traj.final_w.size
    n_b = snaps[0].batch.size if snaps else 0
    np.savez(
        paths["snapshots"],
        k=np.array([s.k for s in snaps], dtype=np.int64),
        w=np.array([s.w for s in snaps]).reshape(len(snaps), d),
        w_next=np.array([s.w_next for s in snaps]).reshape(len(snaps), d),
        batch=np.array([s.batch for s in snaps], dtype=np.int64).reshape(len(snaps), n_b),
        final_w=traj.final_w,
    )
    paths["config"].write_text(json.dumps(traj.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths


def load_trajectory(rundir) -> Trajectory:
    rundir = Path(rundir)
    config = ExperimentConfig.from_dict(json.loads((rundir / "config.json").read_text()))
    records = read_records_csv(rundir / "records.csv")
    snaps, final_w = [], None
    npz = rundir / "snapshots.npz"
    if npz.exists():
        with np.load(npz) as z:
            snaps = [Snapshot(int(k), w, wn, b)
                     for k, w, wn, b in zip(z["k"], z["w"], z["w_next"], z["batch"])]
            final_w = z["final_w"]
    return Trajectory(records, snaps, config, final_w, detect_separation(records))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(paths) -> str:
    """Hash over the per-file digests, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        h.update(sha256_file(p).encode())
        h.update(b"\0")
    return h.hexdigest()


def build_manifest(config_path, dataset_path, outdir, started, extra=None) -> dict:
    import scipy

    inputs = [p for p in (config_path, dataset_path) if p is not None]
    man = {
        "config_path": str(config_path) if config_path else None,
        "dataset_path": str(dataset_path) if dataset_path else None,
        "output_dir": str(outdir),
        "input_hashes": {str(p): sha256_file(p) for p in inputs},
        "content_hash": content_hash(inputs),
        "started": started,
        "finished": now(),
        "versions": {
            "marginflow": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        man.update(extra)
    return man


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def json_safe(obj):
    """Replace non-finite floats by strings so the output is strict JSON."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path):
    Path(path).write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n")
