"""On-disk formats: binary field snapshots, trajectory directories, CSV reports, manifests.

Snapshot layout (``.bchf``), all little-endian::

    b"BCHF" | u32 version=1 | u32 dim | u32 n[0] ... n[dim-1] | u8 bc_mode | f64 data (row-major)

``bc_mode`` is 0 for periodic and 1 for box-neumann.  The physical box length
is not stored; readers supply it (or accept the default ``2 pi``).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import struct
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from bchopt.grid import BCMode, Grid

MAGIC = b"BCHF"
VERSION = 1
_BC_CODE = {BCMode.PERIODIC: 0, BCMode.BOX_NEUMANN: 1}
_BC_FROM_CODE = {v: k for k, v in _BC_CODE.items()}


class FormatError(ValueError):
    pass


# -- snapshots ----------------------------------------------------------------------------


def encode_field(grid: Grid, data: np.ndarray) -> bytes:
    data = np.asarray(data, dtype="<f8")
    if data.shape != grid.n:
        raise ValueError(f"field shape {data.shape} does not match grid {grid.n}")
    head = MAGIC + struct.pack("<II", VERSION, grid.dim) + struct.pack(f"<{grid.dim}I", *grid.n)
    head += struct.pack("<B", _BC_CODE[BCMode(grid.bc_mode)])
    return head + np.ascontiguousarray(data).tobytes(order="C")


def decode_field(buf: bytes, length=None) -> tuple[Grid, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not a BCHF file (bad magic)")
    version, dim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported BCHF version {version}")
    if dim not in (1, 2):
        raise FormatError(f"unsupported dimension {dim}")
    n = struct.unpack_from(f"<{dim}I", buf, 12)
    off = 12 + 4 * dim
    (code,) = struct.unpack_from("<B", buf, off)
    if code not in _BC_FROM_CODE:
        raise FormatError(f"unknown bc_mode code {code}")
    off += 1
    count = int(np.prod(n))
    if len(buf) - off != 8 * count:
        raise FormatError(f"payload has {len(buf) - off} bytes, expected {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(n).astype(float)
    if length is None:
        length = (2 * math.pi,) * dim
    return Grid(tuple(n), tuple(length), _BC_FROM_CODE[code]), data


def write_field(path, grid: Grid, data: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_field(grid, data))
    return path


def read_field(path, length=None) -> tuple[Grid, np.ndarray]:
    return decode_field(Path(path).read_bytes(), length)


def write_vector(path_stem, grid: Grid, data: np.ndarray) -> list[Path]:
    """One file per component: ``<stem>_c0.bchf``, ``<stem>_c1.bchf``."""
    stem = Path(path_stem)
    return [write_field(stem.with_name(f"{stem.name}_c{a}.bchf"), grid, data[a]) for a in range(grid.dim)]


def read_vector(path_stem, dim: int, length=None) -> np.ndarray:
    stem = Path(path_stem)
    return np.stack([read_field(stem.with_name(f"{stem.name}_c{a}.bchf"), length)[1] for a in range(dim)])


# -- CSV ----------------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def write_csv(path, columns, rows) -> Path:
    """Write dict rows with a fixed column order; floats use ``repr`` (round-trip exact)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


DIAG_COLUMNS = ["step", "t", "energy", "F_part", "G_part", "mass", "brinkman_iters", "ch_iters", "residual"]
OPT_COLUMNS = ["iter", "cost_total", "tracking_Q", "tracking_T", "tikhonov", "l1", "stationarity", "step",
               "backtracks", "sparsity_frac_c0", "sparsity_frac_c1"]
TAYLOR_COLUMNS = ["t_scale", "remainder", "slope"]
SWEEP_COLUMNS = ["kappa", "sparsity_fraction", "omega_inf", "converged", "iterations", "monotone"]


# -- trajectories -------------------------------------------------------------------------


def _step_dir(root: Path, k: int) -> Path:
    return root / f"step_{k:06d}"


def write_trajectory(traj, out_dir, every: int = 1) -> Path:
    """Write ``step_%06d/{phi,mu,w,v_c*}.bchf`` for every ``every``-th level plus diagnostics.

    Level ``k`` holds ``phi[k]``; for ``k >= 1`` also ``mu, w`` at level ``k``
    and the velocity of step ``k - 1`` (the one that produced this level).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    g = traj.grid
    N = traj.steps
    levels = sorted(set(range(0, N + 1, max(1, every))) | {N})
    for k in levels:
        d = _step_dir(root, k)
        write_field(d / "phi.bchf", g, traj.phi[k])
        if k >= 1:
            write_field(d / "mu.bchf", g, traj.mu[k - 1])
            write_field(d / "w.bchf", g, traj.w[k - 1])
            write_vector(d / "v", g, traj.v[k - 1])
    if traj.diagnostics:
        write_csv(root / "diagnostics.csv", DIAG_COLUMNS, traj.diagnostics)
    return root


def read_trajectory(out_dir, length=None) -> dict:
    """Load every stored level; returns ``{"grid", "levels", "phi", "mu", "w", "v"}`` keyed by level."""
    root = Path(out_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("step_"))
    if not dirs:
        raise FileNotFoundError(f"no step directories under {root}")
    out = {"levels": [], "phi": {}, "mu": {}, "w": {}, "v": {}}
    grid = None
    for d in dirs:
        k = int(d.name.split("_")[1])
        grid, phi = read_field(d / "phi.bchf", length)
        out["levels"].append(k)
        out["phi"][k] = phi
        if (d / "mu.bchf").exists():
            out["mu"][k] = read_field(d / "mu.bchf", length)[1]
            out["w"][k] = read_field(d / "w.bchf", length)[1]
            out["v"][k] = read_vector(d / "v", grid.dim, length)
    out["grid"] = grid
    return out


def write_gradient(grad: np.ndarray, grid: Grid, out_dir) -> Path:
    """``step_%06d/grad_c*.bchf`` for each time step of the reduced gradient."""
    root = Path(out_dir)
    for k in range(grad.shape[0]):
        write_vector(_step_dir(root, k) / "grad", grid, grad[k])
    return root


def write_control(u: np.ndarray, grid: Grid, out_dir) -> Path:
    root = Path(out_dir)
    for k in range(u.shape[0]):
        write_vector(_step_dir(root, k) / "u", grid, u[k])
    return root


def read_control(out_dir, steps: int, dim: int, length=None) -> np.ndarray:
    root = Path(out_dir)
    return np.stack([read_vector(_step_dir(root, k) / "u", dim, length) for k in range(steps)])


# -- manifest and lock --------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


MANIFEST = "manifest.json"
LOCK = ".bch.lock"


def write_manifest(out_dir, config_text: str, inputs: dict, wall_times: dict, extra: dict | None = None) -> Path:
    """List every file under ``out_dir`` with its sha256, plus provenance.

    The manifest deliberately excludes timestamps and wall times from the
    hashed outputs so reruns stay byte-identical; wall times are recorded in
    the manifest itself only.
    """
    import scipy

    from bchopt import __version__

    root = Path(out_dir)
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in (MANIFEST, LOCK):
            files[p.relative_to(root).as_posix()] = sha256_file(p)
    doc = {
        "config": config_text,
        "inputs": inputs,
        "versions": {"bchopt": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_times": wall_times,
        "files": files,
    }
    if extra:
        doc.update(extra)
    path = root / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(out_dir) -> list[str]:
    """Return the files whose content no longer matches the manifest (missing ones included)."""
    root = Path(out_dir)
    doc = json.loads((root / MANIFEST).read_text())
    bad = []
    for rel, digest in doc["files"].items():
        p = root / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def content_hash(*chunks: bytes | str) -> str:
    """Git-style blob hash of the concatenated inputs."""
    data = b"".join(c.encode() if isinstance(c, str) else c for c in chunks)
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class LockError(RuntimeError):
    pass


@contextmanager
def output_lock(out_dir):
    """Exclusive ownership of an output directory for the duration of a run."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise LockError(f"{root} is in use by another run (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield root
    finally:
        lock.unlink(missing_ok=True)


# -- plot data ----------------------------------------------------------------------------


def export_plotdata(obj, kind: str, out_dir) -> Path:
    """Emit line-plot CSVs; ``kind`` is ``energy``, ``cost``, ``taylor`` or ``sweep``.

    ``obj`` is a trajectory (energy), an optimizer report (cost), a tuple
    ``(rows, slope)`` from the remainder test (taylor) or a sweep result.
    """
    root = Path(out_dir)
    if obj is None:
        raise FileNotFoundError(f"nothing to export for kind {kind!r}")
    if kind == "energy":
        rows = [{"t": r["t"], "energy": r["energy"]} for r in obj.diagnostics]
        return write_csv(root / "energy.csv", ["t", "energy"], rows)
    if kind == "cost":
        return write_csv(root / "cost.csv", OPT_COLUMNS, obj.rows)
    if kind == "taylor":
        rows, slope = obj
        return write_csv(root / "taylor.csv", TAYLOR_COLUMNS,
                         [{"t_scale": t, "remainder": r, "slope": slope} for t, r, *_ in rows])
    if kind == "sweep":
        return write_csv(root / "sweep.csv", SWEEP_COLUMNS, obj.rows)
    raise ValueError(f"unknown plot-data kind {kind!r}")
