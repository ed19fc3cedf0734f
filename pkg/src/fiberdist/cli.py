"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 convergence error, 4 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import resolve
from .errors import FiberDistError, InputError
from .pipeline import STAGES, run_pipeline, run_stage, write_run_log

log = logging.getLogger("fiberdist")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, help="dataset manifest (JSON)")
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out-dir", type=Path, default=Path("fiberdist_out"),
                   help="artifact directory (default ./fiberdist_out)")
    p.add_argument("--workers", type=int, help="processes for voxel fits")
    p.add_argument("-v", "--verbose", action="store_true")


def _fit_flags(p):
    p.add_argument("--grid-level", type=int, choices=(0, 1, 2, 3),
                   help="icosphere level of the direction grid")
    p.add_argument("--fa-threshold", type=float, help="FA below which a voxel is isotropic")


def _smooth_flags(p):
    p.add_argument("--h", type=float, help="bandwidth in mm (skips CV)")
    p.add_argument("--cv", choices=("ocv", "mcv", "none"), help="bandwidth selection rule")


def _track_flags(p):
    p.add_argument("--angle-gate-deg", type=float, help="turning gate in degrees")
    p.add_argument("--max-skip", type=int, help="voxels to pass straight through")
    p.add_argument("--longest", type=int, metavar="N", help="keep only the N longest tracts")
    p.add_argument("--field", choices=("smoothed", "voxelwise", "tensor"),
                   help="direction field to track on")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fiberdist", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a phantom dataset")
    _common(p)
    p.add_argument("--phantom", choices=("P1", "P2", "P3", "P4", "P5", "P6"))
    p.add_argument("--sigma", type=float, help="noise level (S0 / SNR)")

    p = sub.add_parser("fit", help="voxel-wise multi-direction fits")
    _common(p)
    _fit_flags(p)

    p = sub.add_parser("smooth", help="smooth the voxel-wise direction field")
    _common(p)
    _smooth_flags(p)

    p = sub.add_parser("track", help="deterministic tracking")
    _common(p)
    _track_flags(p)

    p = sub.add_parser("eval", help="evaluation report and plot data")
    _common(p)

    p = sub.add_parser("pipeline", help="run all stages")
    _common(p)
    _fit_flags(p)
    _smooth_flags(p)
    _track_flags(p)
    p.add_argument("--phantom", choices=("P1", "P2", "P3", "P4", "P5", "P6"))
    p.add_argument("--sigma", type=float, help="noise level (S0 / SNR)")
    p.add_argument("--stage", choices=STAGES, default="eval", help="last stage to run")
    return parser


_FLAG_KEYS = {
    "seed": "seed",
    "workers": "workers",
    "phantom": "simulate.phantom",
    "sigma": "simulate.sigma",
    "grid_level": "fit.grid_level",
    "fa_threshold": "fit.fa_threshold",
    "h": "smooth.h",
    "cv": "smooth.cv",
    "angle_gate_deg": "track.angle_gate_deg",
    "max_skip": "track.max_skip",
    "longest": "track.longest",
    "field": "track.field",
}


def _validate(args, cfg) -> None:
    if args.manifest is not None and not args.manifest.exists():
        raise InputError(f"manifest {args.manifest} does not exist")
    t = cfg["track"]
    if not 0 < t["angle_gate_deg"] < 90:
        raise InputError("--angle-gate-deg must lie in (0, 90)")
    if t["max_skip"] < 0:
        raise InputError("--max-skip must be >= 0")
    if t["longest"] is not None and t["longest"] < 1:
        raise InputError("--longest must be >= 1")
    h = cfg["smooth"]["h"]
    if h is not None and not h > 0:
        raise InputError("--h must be positive")
    if cfg["simulate"]["sigma"] <= 0:
        raise InputError("sigma must be positive")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {key: getattr(args, attr) for attr, key in _FLAG_KEYS.items()
                     if hasattr(args, attr)}
        cfg = resolve(args.config, overrides)
        if getattr(args, "h", None) is not None:
            cfg["smooth"]["cv"] = "none"
        _validate(args, cfg)
        manifest = args.manifest
        if args.command == "pipeline":
            run_pipeline(args.out_dir, cfg, manifest, args.stage)
        else:
            if manifest is None and args.command == "eval":
                candidate = args.out_dir / "manifest.json"
                manifest = candidate if candidate.exists() else None
            summary = run_stage(args.command, cfg, args.out_dir, manifest)
            if args.command == "simulate":
                manifest = args.out_dir / "manifest.json"
            write_run_log(args.out_dir, cfg, [args.command], {args.command: summary},
                          manifest)
    except FiberDistError as err:
        sys.stderr.write(f"fiberdist: {getattr(err, 'code', 'E_INTERNAL')}: {err}\n")
        return int(err.exit_code)
    except Exception as err:  # noqa: BLE001
        sys.stderr.write(f"fiberdist: E_INTERNAL: {err}\n")
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
