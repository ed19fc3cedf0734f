"""Stage orchestration: simulate -> fit -> smooth -> track -> eval.

Every stage reads its inputs from the output directory (plus the manifest),
writes its artifacts under temporary names and renames them only when the
stage succeeds, so a failed stage leaves no partial files behind.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import fit_config, resolve, smoothing_config, tracker_config
from .errors import FiberDistError, InputError, StageError
from .phantom import (PhantomSpec, crossing_pass_fraction, evaluate, generate, make_phantom)
from .signal import single_tensor_regression_fit
from .smoothing import DirectionField, cv_bandwidth, default_h_grid, smooth_field
from .tracking import VoxelGrid, longest, track_all
from .voxel_fit import estimate_s0_sigma, fit_volume, pool_sigma

__all__ = ["STAGES", "ARTIFACTS", "run_stage", "run_pipeline", "tensor_field"]

log = logging.getLogger(__name__)

STAGES = ("simulate", "fit", "smooth", "track", "eval")

ARTIFACTS = {
    "simulate": ("manifest.json", "dwi.vol", "b0.vol"),
    "fit": ("estimates.json", "field_voxelwise.json", "field_tensor.json"),
    "smooth": ("field_smoothed.json",),
    "track": ("tracts.jsonl", "plot_tracts.tsv"),
    "eval": ("eval.json", "plot_voxelwise.tsv", "plot_smoothed.tsv"),
}


class _Staging:
    """Collects ``name -> temporary path``; commits by renaming."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.paths: dict = {}

    def __call__(self, name) -> Path:
        p = self.out_dir / f".{name}.partial"
        self.paths[name] = p
        return p

    def commit(self):
        for name, p in self.paths.items():
            p.replace(self.out_dir / name)

    def discard(self):
        for p in self.paths.values():
            p.unlink(missing_ok=True)


def _grid_meta(grid: VoxelGrid) -> dict:
    return {"dims": list(grid.dims), "voxel_size": list(grid.voxel_size),
            "origin": list(grid.origin)}


def _grid_from_meta(meta) -> VoxelGrid:
    g = meta.get("grid")
    if g is None:
        raise InputError("artifact has no grid metadata")
    return VoxelGrid(tuple(g["dims"]), tuple(g["voxel_size"]), tuple(g["origin"]))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise InputError(f"{path.name} not found; run the {stage} stage first")
    return path


def tensor_field(dataset, s0_map, indices, fa_threshold) -> DirectionField:
    """Single-tensor baseline: principal eigenvector where FA passes the screen."""
    L, I, A = [], [], []
    for v in dataset.voxel_signals(s0_map, 1.0, indices):
        fit = single_tensor_regression_fit(v, dataset.scheme)
        if fit.fa >= fa_threshold:
            L.append(v.center)
            I.append(v.index)
            A.append(fit.axis.v)
    return DirectionField(L, I, A, "tensor")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _simulate(cfg, out: Path, put, manifest):
    s = cfg["simulate"]
    spec = make_phantom(s["phantom"], seed=int(cfg["seed"]), sigma=float(s["sigma"]),
                        s0=float(s["s0"]), **s["geometry"])
    ds = generate(spec)
    io.write_volume(put("dwi.vol"), ds.dwi)
    io.write_volume(put("b0.vol"), ds.b0)
    io.write_manifest(put("manifest.json"), ds.grid, ds.scheme, phantom=spec.to_dict())
    return {"phantom": spec.name, "dims": list(spec.grid.dims)}


def _fit(cfg, out: Path, put, manifest):
    man, ds, mask = io.read_dataset(manifest)
    fc = fit_config(cfg)
    s0_map, sigma_map = estimate_s0_sigma(ds.b0)
    n_rep = ds.b0.shape[3] if cfg["fit"]["sigma_bias_correction"] else None
    sigma = pool_sigma(sigma_map, mask, n_rep)
    indices = [ix for ix in ds.grid.all_indices() if mask is None or mask[ix]]
    voxels = ds.voxel_signals(s0_map, sigma, indices)
    estimates = fit_volume(voxels, ds.scheme, fc, workers=int(cfg["workers"]))
    meta = {"sigma": sigma, "grid": _grid_meta(ds.grid), "n_voxels": len(estimates)}
    io.write_estimates(put("estimates.json"), estimates, meta)
    io.write_field(put("field_voxelwise.json"), DirectionField.from_estimates(estimates),
                   {"grid": meta["grid"]})
    base = tensor_field(ds, s0_map, indices, fc.fa_threshold)
    io.write_field(put("field_tensor.json"), base, {"grid": meta["grid"]})
    counts = np.bincount([e.J for e in estimates], minlength=5).tolist()
    flagged = sum(1 for e in estimates if e.trace.flags)
    return {"sigma": sigma, "j_counts": counts, "flagged_voxels": flagged}


def _smooth(cfg, out: Path, put, manifest):
    fld, meta = io.read_field(_require(out / "field_voxelwise.json", "fit"))
    sc = smoothing_config(cfg)
    scores = None
    if len(fld.voxels()) == 0:
        smoothed, h = fld, sc.h
    else:
        if sc.h is None:
            if sc.cv == "none":
                raise InputError("no bandwidth given and CV disabled")
            grid = _grid_from_meta(meta)
            h_grid = sc.h_grid or default_h_grid(grid.voxel_size)
            h, scores = cv_bandwidth(fld, h_grid, sc.cv, sc)
            sc = replace(sc, h=h)
        smoothed, h = smooth_field(fld, sc)
    new_meta = {"grid": meta["grid"], "h": h, "cv": sc.cv,
                "cv_scores": None if scores is None else [float(s) for s in scores]}
    io.write_field(put("field_smoothed.json"), smoothed, new_meta)
    return {"h": h, "entries": len(smoothed)}


def _track(cfg, out: Path, put, manifest):
    source = cfg["track"]["field"]
    name = {"smoothed": "field_smoothed.json", "voxelwise": "field_voxelwise.json",
            "tensor": "field_tensor.json"}.get(source)
    if name is None:
        raise InputError(f"unknown track field {source!r}")
    fld, meta = io.read_field(_require(out / name, "smooth" if source == "smoothed" else "fit"))
    grid = _grid_from_meta(meta)
    roi = None
    if cfg["track"]["seeding"] == "roi":
        if manifest is None:
            raise InputError("roi seeding needs a manifest with a mask")
        _, _, mask = io.read_dataset(manifest)
        if mask is None:
            raise InputError("roi seeding needs a mask in the manifest")
        roi = frozenset(map(tuple, np.argwhere(mask).tolist()))
    tracts = track_all(fld, grid, tracker_config(cfg, roi))
    n = cfg["track"]["longest"]
    if n is not None:
        tracts = longest(tracts, int(n))
    io.write_tracts(put("tracts.jsonl"), tracts)
    io.emit_tract_plot_data(put("plot_tracts.tsv"), tracts)
    return {"field": source, "tracts": len(tracts)}


def _field_to_lists(fld: DirectionField) -> dict:
    return {ix: [fld.axes[p] for p in pos] for ix, pos in fld.voxels().items()}


def _eval(cfg, out: Path, put, manifest):
    voxelwise, meta = io.read_field(_require(out / "field_voxelwise.json", "fit"))
    grid = _grid_from_meta(meta)
    report = {"grid": meta["grid"]}
    smoothed = None
    if (out / "field_smoothed.json").exists():
        smoothed, smeta = io.read_field(out / "field_smoothed.json")
        report["h"] = smeta.get("h")
    tracts = io.read_tracts(out / "tracts.jsonl") if (out / "tracts.jsonl").exists() else []
    report["tracts"] = {"count": len(tracts),
                        "total_length_mm": float(sum(t.length for t in tracts))}
    spec = None
    if manifest is not None:
        man = io.read_manifest(manifest)
        if man.phantom:
            spec = PhantomSpec.from_dict(man.phantom)
    if spec is not None:
        truth = spec.truth()
        report["voxelwise"] = evaluate(_field_to_lists(voxelwise), truth).summary()
        if smoothed is not None:
            report["smoothed"] = evaluate(_field_to_lists(smoothed), truth).summary()
        if "thickness" in spec.meta and tracts:
            frac, n = crossing_pass_fraction(tracts, spec)
            report["tracts"]["crossing_pass_fraction"] = None if n == 0 else frac
            report["tracts"]["crossing_candidates"] = n
    else:
        counts = np.bincount([len(v) for v in _field_to_lists(voxelwise).values()],
                             minlength=5)
        report["voxelwise"] = {"direction_counts": counts.tolist()}
    io.write_json(put("eval.json"), report)
    plane = cfg["plot"]["plane"]
    k = {"x": 0, "y": 1, "z": 2}.get(plane, 2)
    sl = cfg["plot"]["slice"]
    sl = grid.dims[k] // 2 if sl is None else int(sl)
    io.emit_plot_data(put("plot_voxelwise.tsv"), voxelwise, grid, plane, sl)
    io.emit_plot_data(put("plot_smoothed.tsv"), smoothed if smoothed is not None
                      else DirectionField([], [], []), grid, plane, sl)
    return {"evaluated": spec is not None}


_RUNNERS = {"simulate": _simulate, "fit": _fit, "smooth": _smooth, "track": _track,
            "eval": _eval}


def run_stage(stage, cfg, out_dir, manifest=None) -> dict:
    """Run one stage; failures are re-raised as StageError with no files left."""
    if stage not in _RUNNERS:
        raise InputError(f"unknown stage {stage!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "fit" and manifest is None:
        raise StageError(stage, InputError("fit needs --manifest"))
    staging = _Staging(out)
    try:
        summary = _RUNNERS[stage](cfg, out, staging, manifest)
    except FiberDistError as err:
        staging.discard()
        raise StageError(stage, err) from err
    except Exception as err:  # noqa: BLE001 - anything else is an internal error
        staging.discard()
        raise StageError(stage, err) from err
    staging.commit()
    return summary


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_log(out_dir, cfg, stages, summaries, manifest=None) -> None:
    """Config echo, seed, stage summaries and artifact digests (no timestamps)."""
    out = Path(out_dir)
    digests = {}
    for stage in stages:
        for name in ARTIFACTS[stage]:
            p = out / name
            if p.exists():
                digests[name] = _sha256(p)
    log_obj = {
        "seed": cfg["seed"],
        "config": cfg,
        "stages": list(stages),
        "summaries": summaries,
        "manifest_sha256": _sha256(Path(manifest)) if manifest else None,
        "artifacts": digests,
    }
    io.write_json(out / "run_log.json", log_obj)


def run_pipeline(out_dir, cfg=None, manifest=None, stop_after="eval") -> dict:
    """Run stages in order (simulating first when no manifest is given).

    Returns a dict of stage summaries.  Any failure removes that stage's
    partial artifacts and raises StageError.
    """
    cfg = resolve() if cfg is None else cfg
    if stop_after not in STAGES:
        raise InputError(f"unknown stage {stop_after!r}")
    out = Path(out_dir)
    stages = list(STAGES[: STAGES.index(stop_after) + 1])
    if manifest is not None:
        stages = [s for s in stages if s != "simulate"]
    summaries = {}
    for stage in stages:
        summaries[stage] = run_stage(stage, cfg, out, manifest)
        if stage == "simulate":
            manifest = out / "manifest.json"
        log.info("stage %s done: %s", stage, json.dumps(summaries[stage], sort_keys=True))
    write_run_log(out, cfg, stages, summaries, manifest)
    return summaries
