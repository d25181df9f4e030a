"""Delimited output, run manifests and the published reference table."""

from __future__ import annotations

import csv
import json
import math
import platform
import subprocess
from importlib import metadata
from pathlib import Path

import numpy as np

__all__ = ["fmt", "write_csv", "write_manifest", "build_id", "REFERENCE_TABLE", "TABLE_COLUMNS"]

TABLE_COLUMNS = ("lambda_star", "y0", "u", "u_c", "p_at_L", "p_at_0")

# published statistics at t=0, x0=1, mu_hat(0)=0.07
REFERENCE_TABLE = {
    (0.0, "mc"): (1.65, 1.883, -0.561, 1.086, 0.746, 0.003),
    (0.0, "pinn"): (1.7, 1.911, -0.601, 1.13, 0.782, 0.0),
    (0.0, "lagrange"): (1.659, 1.885, -0.564, 1.095, 0.751, 0.0),
    (0.1, "mc"): (1.453, 1.795, -0.411, 0.898, 0.5, 0.102),
    (0.1, "pinn"): (1.464, 1.806, -0.435, 0.91, 0.52, 0.1),
    (0.1, "lagrange"): (1.452, 1.794, -0.411, 0.896, 0.5, 0.1),
    (0.35, "mc"): (0.478, 1.214, -0.095, 0.216, 0.0, 0.35),
    (0.35, "pinn"): (0.614, 1.295, -0.114, 0.31, 0.0, 0.35),
    (0.35, "lagrange"): (0.483, 1.216, -0.095, 0.219, 0.0, 0.35),
    (1.0, "mc"): (0.0, 0.946, -0.086, -0.085, 0.0, 0.395),
    (1.0, "pinn"): (0.0, 0.94, -0.046, -0.084, 0.0, 0.374),
    (1.0, "lagrange"): (0.0, 0.945, -0.085, -0.085, 0.0, 0.395),
}


def fmt(v) -> str:
    """Six significant digits for floats; everything else via ``str``."""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        out = f"{v:.6g}"
        return "0" if out == "-0" else out
    if v is None:
        return ""
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])
    return path


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return "qvar-" + metadata.version("qvar")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out_dir, command: str, config: dict, outputs, extra: dict | None = None) -> Path:
    """Resolved config and build identity next to the outputs; no timestamps, so reruns match."""
    doc = {
        "command": command,
        "build": build_id(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    if extra:
        doc.update(extra)
    path = Path(out_dir) / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path
