"""File formats: manifests, raw volumes, estimates, direction fields, tracts, plot data.

Volumes are raw little-endian float32 arrays, x varying fastest, behind a
small header::

    8 bytes  magic  b"FDVOL\\x00\\x01\\x00"
    4 bytes  ndim   (uint32 LE)
    4*ndim   shape  (uint32 LE each)
    4 bytes  CRC32 of the payload (uint32 LE)

Everything else is JSON (or JSON lines for tracts).  Floats are written with
Python's shortest round-trip repr, so float64 values read back bit-exact.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumError, DimensionError, GradientNormError, InputError
from .geometry import Axis
from .signal import GradientScheme, TensorComponent, VoxelModel
from .smoothing import DirectionField
from .tracking import Tract, VoxelGrid, tract_rgb
from .voxel_fit import FitRecord, FitTrace, VoxelEstimate

__all__ = [
    "MAGIC",
    "Manifest",
    "write_volume",
    "read_volume",
    "read_manifest",
    "write_manifest",
    "read_dataset",
    "write_dataset",
    "write_estimates",
    "read_estimates",
    "write_field",
    "read_field",
    "write_tracts",
    "read_tracts",
    "emit_plot_data",
    "emit_tract_plot_data",
    "write_json",
]

log = logging.getLogger(__name__)

MAGIC = b"FDVOL\x00\x01\x00"
GRADIENT_TOL = 1e-6


def write_json(path, obj) -> None:
    """Deterministic JSON (sorted keys, fixed separators, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "))
    Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# raw volumes
# ---------------------------------------------------------------------------

def write_volume(path, array) -> None:
    a = np.asarray(array)
    payload = np.asarray(a, dtype="<f4").tobytes(order="F")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    header += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def read_volume(path, shape=None) -> np.ndarray:
    """Read a raw volume; ``shape`` (if given) must match the header."""
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise InputError(f"cannot read volume {path}: {err}") from err
    if raw[:8] != MAGIC:
        raise InputError(f"{path}: not a volume file (bad magic)")
    try:
        (ndim,) = struct.unpack_from("<I", raw, 8)
        dims = struct.unpack_from(f"<{ndim}I", raw, 12)
        (crc,) = struct.unpack_from("<I", raw, 12 + 4 * ndim)
    except struct.error as err:
        raise DimensionError(f"{path}: truncated header") from err
    payload = raw[16 + 4 * ndim:]
    if len(payload) != 4 * int(np.prod(dims)):
        raise DimensionError(f"{path}: header shape {dims} does not match payload "
                             f"of {len(payload)} bytes")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    if shape is not None and tuple(shape) != tuple(dims):
        raise DimensionError(f"{path}: expected shape {tuple(shape)}, found {dims}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return arr.astype(float)


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Manifest:
    dims: tuple
    voxel_size: tuple
    origin: tuple
    b_value: float
    gradients: np.ndarray
    dwi: Path
    b0: Path
    mask: Path | None = None
    endianness: str = "little"
    phantom: dict | None = None
    path: Path | None = None

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.dims, self.voxel_size, self.origin)


def _check_gradients(g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[1] != 3 or len(g) == 0:
        raise DimensionError("gradient table must have m rows of 3 numbers")
    norms = np.linalg.norm(g, axis=1)
    dev = np.abs(norms - 1.0)
    if np.any(dev > GRADIENT_TOL + 1e-12):
        k = int(np.argmax(dev))
        raise GradientNormError(f"gradient {k} has norm {norms[k]!r}")
    if np.any(dev > 0):
        log.warning("renormalizing %d gradient directions", int(np.sum(dev > 0)))
    return g / norms[:, None]


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise InputError(f"cannot read manifest {path}: {err}") from err
    try:
        base = path.parent
        dims = tuple(int(v) for v in d["dims"])
        if len(dims) != 3 or min(dims) < 1:
            raise DimensionError("dims must be three positive integers")
        if d.get("endianness", "little") != "little":
            raise InputError("only little-endian volumes are supported")
        mask = d.get("mask")
        return Manifest(
            dims=dims,
            voxel_size=tuple(float(v) for v in d.get("voxel_size", (1.0, 1.0, 1.0))),
            origin=tuple(float(v) for v in d.get("origin", (0.0, 0.0, 0.0))),
            b_value=float(d["b_value"]),
            gradients=_check_gradients(d["gradients"]),
            dwi=base / d["dwi"],
            b0=base / d["b0"],
            mask=base / mask if mask else None,
            phantom=d.get("phantom"),
            path=path,
        )
    except KeyError as err:
        raise InputError(f"manifest missing field {err}") from err
    except (TypeError, ValueError) as err:
        if isinstance(err, InputError):
            raise
        raise InputError(f"malformed manifest: {err}") from err


def write_manifest(path, grid: VoxelGrid, scheme: GradientScheme, dwi="dwi.vol",
                   b0="b0.vol", mask=None, phantom=None) -> None:
    d = {
        "dims": list(grid.dims),
        "voxel_size": list(grid.voxel_size),
        "origin": list(grid.origin),
        "b_value": scheme.b_value,
        "gradients": scheme.directions.tolist(),
        "dwi": dwi,
        "b0": b0,
        "endianness": "little",
    }
    if mask:
        d["mask"] = mask
    if phantom is not None:
        d["phantom"] = phantom
    write_json(path, d)


def write_dataset(out_dir, dataset, phantom=None, mask=None) -> Path:
    """Write volumes plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "dwi.vol", dataset.dwi)
    write_volume(out / "b0.vol", dataset.b0)
    mask_name = None
    if mask is not None:
        write_volume(out / "mask.vol", np.asarray(mask, dtype=float))
        mask_name = "mask.vol"
    manifest = out / "manifest.json"
    write_manifest(manifest, dataset.grid, dataset.scheme, mask=mask_name, phantom=phantom)
    return manifest


def read_dataset(path):
    """Load a manifest and its volumes.

    Returns ``(manifest, dataset, mask)``; ``mask`` is a boolean array or None.
    """
    from .phantom import Dataset, PhantomSpec

    man = read_manifest(path)
    m = len(man.gradients)
    dwi = read_volume(man.dwi)
    if dwi.shape != man.dims + (m,):
        raise DimensionError(f"DWI volume shape {dwi.shape} does not match dims "
                             f"{man.dims} and {m} gradients")
    b0 = read_volume(man.b0)
    if b0.ndim != 4 or b0.shape[:3] != man.dims:
        raise DimensionError(f"b0 volume shape {b0.shape} does not match dims {man.dims}")
    mask = None
    if man.mask is not None:
        mvol = read_volume(man.mask)
        if mvol.shape != man.dims:
            raise DimensionError(f"mask shape {mvol.shape} does not match dims {man.dims}")
        mask = mvol > 0.5
    scheme = GradientScheme(man.gradients, man.b_value, b0.shape[3])
    truth = PhantomSpec.from_dict(man.phantom).truth() if man.phantom else None
    return man, Dataset(man.grid, scheme, dwi, b0, truth), mask


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------

def _model_to_dict(model: VoxelModel) -> dict:
    return {
        "tau": [c.tau for c in model.components],
        "alpha": [c.alpha for c in model.components],
        "axes": [list(map(float, c.axis.v)) for c in model.components],
        "isotropic_tau": model.isotropic_tau,
    }


def _model_from_dict(d) -> VoxelModel:
    comps = tuple(TensorComponent(t, a, Axis(v)) for t, a, v in
                  zip(d["tau"], d["alpha"], d["axes"]))
    return VoxelModel(comps, isotropic_tau=d.get("isotropic_tau"))


def _record_to_dict(r: FitRecord) -> dict:
    return {"I": r.I, "model": _model_to_dict(r.model), "loglik": r.loglik, "bic": r.bic,
            "converged": r.converged, "merged_from": r.merged_from}


def _record_from_dict(d) -> FitRecord:
    return FitRecord(d["I"], _model_from_dict(d["model"]), d["loglik"], d["bic"],
                     d["converged"], d["merged_from"])


def write_estimates(path, estimates, meta=None) -> None:
    """Per-voxel records: index, J, tau, alpha, axes, FA, flags and the BIC trace."""
    voxels = []
    for e in sorted(estimates, key=lambda e: e.index):
        t = e.trace
        voxels.append({
            "index": list(e.index),
            "center": [float(c) for c in e.center],
            "J": e.J,
            "model": _model_to_dict(e.model),
            "fa": float(e.fa_screen),
            "flags": list(t.flags),
            "screened": t.screened,
            "isotropic": _record_to_dict(t.isotropic) if t.isotropic else None,
            "records": [_record_to_dict(r) for r in t.records],
        })
    write_json(path, {"format": "fiberdist-estimates/1", "meta": meta or {}, "voxels": voxels})


def read_estimates(path):
    """Returns ``(estimates, meta)``."""
    d = _read_json(path, "fiberdist-estimates/1")
    out = []
    for v in d["voxels"]:
        iso = _record_from_dict(v["isotropic"]) if v["isotropic"] else None
        recs = tuple(_record_from_dict(r) for r in v["records"])
        trace = FitTrace(recs, iso, v["J"], v["screened"], tuple(v["flags"]))
        out.append(VoxelEstimate(tuple(v["index"]), tuple(v["center"]),
                                 _model_from_dict(v["model"]), trace, v["fa"]))
    return out, d["meta"]


def _read_json(path, fmt):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise InputError(f"cannot read {path}: {err}") from err
    if not isinstance(d, dict) or d.get("format") != fmt:
        raise InputError(f"{path}: expected a {fmt} file")
    return d


# ---------------------------------------------------------------------------
# direction fields
# ---------------------------------------------------------------------------

def write_field(path, fld: DirectionField, meta=None) -> None:
    entries = [{"location": [float(v) for v in l], "index": [int(i) for i in ix],
                "axis": [float(v) for v in a], "source": s}
               for l, ix, a, s in zip(fld.locations, fld.indices, fld.axes, fld.sources)]
    write_json(path, {"format": "fiberdist-field/1", "meta": meta or {}, "entries": entries})


def read_field(path):
    """Returns ``(field, meta)``."""
    d = _read_json(path, "fiberdist-field/1")
    e = d["entries"]
    fld = DirectionField([x["location"] for x in e], [x["index"] for x in e],
                         [x["axis"] for x in e], [x["source"] for x in e])
    return fld, d["meta"]


# ---------------------------------------------------------------------------
# tracts
# ---------------------------------------------------------------------------

def write_tracts(path, tracts) -> None:
    """One JSON object per line: seed, points, per-segment RGB, termination."""
    lines = []
    for t in tracts:
        rec = {
            "seed": list(t.seed),
            "points": t.points.tolist(),
            "directions": t.directions.tolist(),
            "rgb": tract_rgb(t).tolist() if len(t.directions) else [],
            "termination": list(t.termination),
            "length": t.length,
        }
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_tracts(path) -> list[Tract]:
    out = []
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from err
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            out.append(Tract(np.array(r["points"], float).reshape(-1, 3),
                             np.array(r["directions"], float).reshape(-1, 3),
                             tuple(r["seed"]), tuple(r["termination"])))
        except (json.JSONDecodeError, KeyError) as err:
            raise InputError(f"{path}:{n}: malformed tract record") from err
    return out


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

_AXES = {"x": 0, "y": 1, "z": 2}


def emit_plot_data(path, fld: DirectionField, grid: VoxelGrid, plane="z", slice_index=None,
                   cluster_ids=None) -> int:
    """Directions in one grid plane projected onto it, as tab-separated rows.

    Columns are ``x y dx dy cluster``; ``(x, y)`` are the in-plane voxel-center
    coordinates and ``(dx, dy)`` the projected axis.  ``cluster`` numbers the
    directions within each voxel unless ``cluster_ids`` is given.  Returns the
    number of rows written.
    """
    if plane not in _AXES:
        raise InputError(f"plane must be one of x, y, z, not {plane!r}")
    k = _AXES[plane]
    if slice_index is None:
        slice_index = grid.dims[k] // 2
    if not 0 <= slice_index < grid.dims[k]:
        raise InputError(f"slice {slice_index} outside 0..{grid.dims[k] - 1}")
    a, b = [i for i in range(3) if i != k]
    rows = ["x\ty\tdx\tdy\tcluster"]
    for ix, pos in fld.voxels().items():
        if ix[k] != slice_index:
            continue
        c = fld.locations[pos[0]]
        for j, p in enumerate(pos):
            v = fld.axes[p]
            cid = j if cluster_ids is None else cluster_ids[p]
            rows.append("\t".join([repr(float(c[a])), repr(float(c[b])), repr(float(v[a])),
                                  repr(float(v[b])), str(int(cid))]))
    Path(path).write_text("\n".join(rows) + "\n")
    return len(rows) - 1


def emit_tract_plot_data(path, tracts) -> int:
    """Tract polylines: ``tract point x y z r g b`` (colour of the segment ending there)."""
    rows = ["tract\tpoint\tx\ty\tz\tr\tg\tb"]
    for t_id, t in enumerate(tracts):
        rgb = tract_rgb(t) if len(t.directions) else np.zeros((0, 3))
        for p_id, p in enumerate(t.points):
            col = rgb[max(p_id - 1, 0)] if len(rgb) else np.zeros(3)
            rows.append("\t".join([str(t_id), str(p_id)] + [repr(float(v)) for v in p]
                                  + [repr(float(v)) for v in col]))
    Path(path).write_text("\n".join(rows) + "\n")
    return len(rows) - 1
