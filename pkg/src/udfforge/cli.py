"""``udfforge`` command line: synth, train, extract, deform, eval, export-field.

Every subcommand accepts ``--config file.json``; the file holds ``"version": 1``
and the command's parameters, flags given on the command line override it, and
the merged configuration is written next to the outputs as ``config.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

CONFIG_VERSION = 1

log = logging.getLogger("udfforge")


class UsageError(Exception):
    """Bad flags, config or input paths (exit code 2)."""


# --------------------------------------------------------------------------
# parameters per command; None means "required"
# --------------------------------------------------------------------------

TRAIN_KEYS = {
    "lambda_far": 1.0,
    "lambda_near": 1.0,
    "lambda_proj": 0.1,
    "total_iters": 5000,
    "far_only_until": None,
    "lr0": 1e-3,
    "far_grad_mode": "full",
    "init_sphere_radius": 0.5,
    "checkpoint_every": 0,
    "arch": {"num_layers": 8, "hidden_width": 256, "encoding_frequencies": 6},
    "sampler": {},
    "lambda_rgb_ssim": 0.2,
    "lambda_depth": 1000.0,
    "lambda_norm": 0.05,
}

DEFAULTS = {
    "synth": {"kind": None, "n": 2000, "noise": 0.0, "seed": None, "out": None, "binary": False, "n_gt": 50000},
    "train": {"cloud": None, "out": None, "resume": None, "seed": None, "normalize": "auto", **TRAIN_KEYS},
    "extract": {
        "checkpoint": None, "out": None, "res": 64, "bbox": [[-1, -1, -1], [1, 1, 1]], "iso_band": None,
        "points": 10000, "residual_threshold": 0.005, "seed": None,
    },
    "deform": {
        "checkpoint": None, "out": None, "points": None, "n": 10000, "steps": 20, "fraction": 0.5,
        "bbox": [[-1, -1, -1], [1, 1, 1]], "seed": None,
    },
    "eval": {
        "checkpoint": None, "out": None, "oracle": None, "gt": None, "res": 48, "band": 0.3,
        "bbox": [[-1, -1, -1], [1, 1, 1]], "grad_points": 100, "mesh_res": 64, "points": 10000,
        "residual_threshold": 0.005, "seed": None,
    },
    "export-field": {"checkpoint": None, "out": None, "res": 32, "bbox": [[-1, -1, -1], [1, 1, 1]]},
}

# keys that name input files (must exist) vs output locations
INPUT_PATHS = {"cloud", "resume", "checkpoint", "oracle", "gt"}
# "points" is a file only for deform; elsewhere it is a count
INPUT_PATHS_BY_COMMAND = {"deform": INPUT_PATHS | {"points"}}
OUTPUT_PATHS = {"out"}


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path, command: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}:1: config must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise UsageError(f"{path}:{_key_line(text, 'version') or 1}: expected \"version\": {CONFIG_VERSION}")
    cfg = {k: v for k, v in cfg.items() if k != "version"}
    allowed = set(DEFAULTS[command]) | {"threads"}
    for k in cfg:
        if k not in allowed:
            raise UsageError(f"{path}:{_key_line(text, k)}: unknown key {k!r} for command {command!r}")
    for nested, cls_keys in (("arch", ("num_layers", "hidden_width", "encoding_frequencies")), ("sampler", None)):
        if nested in cfg and isinstance(cfg[nested], dict):
            from .sampling import SamplerConfig

            ok = set(cls_keys) if cls_keys else set(SamplerConfig.__dataclass_fields__)
            for k in cfg[nested]:
                if k not in ok:
                    raise UsageError(f"{path}:{_key_line(text, k)}: unknown {nested} key {k!r}")
    return cfg


def merge_config(command: str, file_cfg: dict, flags: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    for src in (file_cfg, flags):
        for k, v in src.items():
            if v is None or k == "threads":
                continue
            if isinstance(cfg.get(k), dict) and isinstance(v, dict):
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    if "seed" in cfg and cfg["seed"] is None:
        env = os.environ.get("UDFFORGE_SEED")
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"UDFFORGE_SEED must be an integer, got {env!r}") from None
    missing = [k for k, v in cfg.items() if v is None and k not in ("resume", "far_only_until", "iso_band", "points", "init_sphere_radius")]
    if command == "deform":
        missing = [k for k in missing if k != "points"]
    if missing:
        raise UsageError(f"{command}: missing required parameter(s): {', '.join(missing)}")
    for k in INPUT_PATHS_BY_COMMAND.get(command, INPUT_PATHS) & set(cfg):
        if cfg[k] is not None and not Path(cfg[k]).is_file():
            raise UsageError(f"{command}: {k} file not found: {cfg[k]}")
    return cfg


def _check_out_dir(path) -> Path:
    out = Path(path)
    parent = out if out.exists() else out.parent
    while not parent.exists():
        parent = parent.parent
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output location is not writable: {out}")
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path exists and is not a directory: {out}")
    return out


def _write_config(out_dir: Path, command: str, cfg: dict) -> None:
    doc = {"version": CONFIG_VERSION, "command": command, **cfg}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    from .geometry import write_xyz
    from .surfel import SCENE_ALIASES, SCENE_KINDS, gen_scene, save_cloud

    kind = SCENE_ALIASES.get(cfg["kind"], cfg["kind"])
    if kind not in SCENE_KINDS:
        raise UsageError(f"unknown kind {cfg['kind']!r}; choose from {sorted(set(SCENE_KINDS) | set(SCENE_ALIASES))}")
    if cfg["n"] < 1 or cfg["noise"] < 0:
        raise UsageError("n must be >= 1 and noise >= 0")
    out = _check_out_dir(cfg["out"])
    scene = gen_scene(kind, int(cfg["n"]), float(cfg["noise"]), int(cfg["seed"]), n_gt=int(cfg["n_gt"]))
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(scene.cloud, out / ("cloud.bin" if cfg["binary"] else "cloud.txt"))
    write_xyz(scene.gt_samples, out / "gt_samples.xyz")
    (out / "oracle.json").write_text(json.dumps({"scene": kind, **scene.oracle.to_dict()}, indent=2, sort_keys=True) + "\n")
    _write_config(out, "synth", cfg)
    print(f"wrote {len(scene.cloud)} surfels ({kind}) to {out}")
    return 0


def _train_config(cfg: dict):
    from .field import FieldArch
    from .sampling import SamplerConfig
    from .training import TrainConfig

    try:
        return TrainConfig(
            **{k: cfg[k] for k in TRAIN_KEYS if k not in ("arch", "sampler")},
            seed=int(cfg["seed"]),
            arch=FieldArch(**cfg["arch"]),
            sampler=SamplerConfig(**cfg["sampler"]),
        )
    except (TypeError, ValueError) as e:
        raise UsageError(f"train: {e}") from None


def _rng_from_meta(meta: dict):
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return rng


def cmd_train(cfg: dict) -> int:
    from .field import SceneTransform, load_checkpoint, save_checkpoint
    from .surfel import CloudFormatError, load_cloud, normalize_cloud, save_cloud
    from .training import Adam, TrainingAborted, TrainState, train

    tcfg = _train_config(cfg)
    out = _check_out_dir(cfg["out"])
    try:
        cloud = load_cloud(cfg["cloud"], require_nonempty=True)
    except CloudFormatError as e:
        raise UsageError(str(e)) from None
    outside = np.any(np.abs(cloud.centers) > 1.0)
    if cfg["normalize"] is True or (cfg["normalize"] == "auto" and outside):
        cloud = normalize_cloud(cloud)
    state = None
    if cfg["resume"]:
        try:
            field, transform, arrays, meta = load_checkpoint(cfg["resume"])
        except (ValueError, KeyError) as e:
            raise UsageError(f"resume: {e}") from None
        if "adam_m" not in arrays or "centers" not in arrays:
            raise UsageError(f"resume: {cfg['resume']} is not a training checkpoint")
        cloud.transform = transform
        centers = arrays["centers"].reshape(-1, 3)
        if len(centers) != len(cloud):
            raise UsageError(f"resume: checkpoint holds {len(centers)} centers, cloud has {len(cloud)}")
        opt = Adam(field.params.size, m=arrays["adam_m"], v=arrays["adam_v"], t=int(meta["adam_t"]))
        state = TrainState(field, cloud.with_centers(centers), opt, int(meta["iter"]), [], _rng_from_meta(meta))

    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "field.ckpt"

    def checkpoint(st):
        save_checkpoint(
            ckpt,
            st.field,
            st.cloud.transform,
            {"adam_m": st.optimizer.m, "adam_v": st.optimizer.v, "centers": st.cloud.centers},
            {"iter": st.iter, "adam_t": st.optimizer.t, "rng_state": st.rng.bit_generator.state},
        )

    logf = open(out / "metrics.ndjson", "a" if cfg["resume"] else "w")

    def on_iter(st, rec):
        logf.write(json.dumps(rec, sort_keys=True) + "\n")
        if rec["iter"] % 500 == 0:
            log.info("iter %d l_far=%s l_near=%s l_proj=%s", rec["iter"], rec["l_far"], rec["l_near"], rec["l_proj"])

    try:
        state = train(cloud, tcfg, state=state, on_iter=on_iter, on_checkpoint=checkpoint)
    except TrainingAborted as e:
        log.error("%s", e)
        return 1
    finally:
        logf.close()
    checkpoint(state)
    final = state.cloud.with_centers(state.cloud.transform.invert(state.cloud.centers))
    final.scales = state.cloud.scales / state.cloud.transform.scale
    save_cloud(final, out / "cloud_final.txt")
    _write_config(out, "train", cfg)
    last = state.log[-1] if state.log else {}
    print(f"trained {state.iter} iterations; final l_far={last.get('l_far')} l_near={last.get('l_near')}")
    return 0


def _load_field(path):
    from .field import load_checkpoint

    try:
        field, transform, _, _ = load_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise UsageError(f"checkpoint {path}: {e}") from None
    return field, transform


def cmd_extract(cfg: dict) -> int:
    from .geometry import extract_mesh, extract_surface_points, mesh_boundary_loops, write_obj, write_xyz

    field, transform = _load_field(cfg["checkpoint"])
    out = _check_out_dir(cfg["out"])
    bbox = cfg["bbox"]
    mesh = extract_mesh(field, bbox, int(cfg["res"]), cfg["iso_band"])
    out.mkdir(parents=True, exist_ok=True)
    loops = mesh_boundary_loops(mesh)
    mesh.vertices = transform.invert(mesh.vertices)
    write_obj(mesh, out / "mesh.obj", loops)
    rng = np.random.default_rng(int(cfg["seed"]))
    n_pts = int(cfg["points"])
    kept_frac = None
    if n_pts > 0:
        pts, kept_frac = extract_surface_points(field, n_pts, float(cfg["residual_threshold"]), rng, bbox)
        write_xyz(transform.invert(pts), out / "surface_points.xyz")
    stats = {**mesh.stats, "vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
             "boundary_edges": len(mesh.boundary_edges), "boundary_loops": len(loops), "kept_fraction": kept_frac}
    (out / "extract.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _write_config(out, "extract", cfg)
    if mesh.is_empty:
        print(f"empty mesh: {mesh.stats.get('diagnostic', 'no triangles')}")
    else:
        print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles, {len(loops)} boundary loops")
    return 0


def cmd_deform(cfg: dict) -> int:
    from .geometry import deform_cloud, read_xyz, write_trace

    field, transform = _load_field(cfg["checkpoint"])
    out = _check_out_dir(cfg["out"])
    if cfg["points"]:
        pts = transform.apply(read_xyz(cfg["points"]))
    else:
        rng = np.random.default_rng(int(cfg["seed"]))
        lo, hi = np.asarray(cfg["bbox"][0], float), np.asarray(cfg["bbox"][1], float)
        pts = lo + (hi - lo) * rng.uniform(size=(int(cfg["n"]), 3))
    trace = deform_cloud(field, pts, int(cfg["steps"]), float(cfg["fraction"]))
    trace.points = [transform.invert(p) for p in trace.points]
    write_trace(trace, out)
    _write_config(out, "deform", cfg)
    print(f"deformed {len(pts)} points; mean residual {trace.residual[0]:.4g} -> {trace.residual[-1]:.4g}")
    return 0


def cmd_eval(cfg: dict) -> int:
    from .field import AnalyticField
    from .geometry import extract_mesh, extract_surface_points, mesh_boundary_loops, read_xyz
    from .metrics import EvalReport, chamfer, grad_check, udf_error

    field, transform = _load_field(cfg["checkpoint"])
    out = _check_out_dir(cfg["out"])
    try:
        oracle = AnalyticField.from_dict(json.loads(Path(cfg["oracle"]).read_text()))
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"oracle {cfg['oracle']}: {e}") from None
    gt = transform.apply(read_xyz(cfg["gt"]))
    rng = np.random.default_rng(int(cfg["seed"]))
    bbox = cfg["bbox"]
    mae, mx = udf_error(field, oracle, bbox, int(cfg["res"]), float(cfg["band"]))
    gerr = grad_check(field, int(cfg["grad_points"]), rng, bbox)
    pts, _ = extract_surface_points(field, int(cfg["points"]), float(cfg["residual_threshold"]), rng, bbox)
    cd = chamfer(pts, gt, "euclidean") if len(pts) else float("inf")
    loops = mesh_boundary_loops(extract_mesh(field, bbox, int(cfg["mesh_res"])))
    report = EvalReport(cd, mae, mx, gerr, len(loops), config=cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    _write_config(out, "eval", cfg)
    print(report.table())
    return 0


def cmd_export_field(cfg: dict) -> int:
    from .geometry import eval_grid, write_grid

    field, _ = _load_field(cfg["checkpoint"])
    out = _check_out_dir(cfg["out"])
    grid = eval_grid(field, cfg["bbox"], int(cfg["res"]))
    out.mkdir(parents=True, exist_ok=True)
    vol, side = write_grid(grid, out / "field.f32")
    _write_config(out, "export-field", cfg)
    print(f"wrote {vol} ({vol.stat().st_size} bytes) and {side.name}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "deform": cmd_deform,
    "eval": cmd_eval,
    "export-field": cmd_export_field,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _json_arg(s):
    try:
        return json.loads(s)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"invalid JSON: {e.msg}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udfforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON config file (version 1)")
        sp.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 is fully deterministic")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic surfel scene")
    common(sp)
    sp.add_argument("--kind", choices=["disk", "plane_disk", "sphere", "parallel_sheets", "sheets", "curved_sheet", "curved"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--n-gt", dest="n_gt", type=int)
    sp.add_argument("--binary", action="store_true", default=None)

    sp = sub.add_parser("train", help="fit a neural UDF to a surfel cloud")
    common(sp)
    sp.add_argument("--cloud")
    sp.add_argument("--resume", help="training checkpoint to continue from")
    sp.add_argument("--total-iters", dest="total_iters", type=int)
    sp.add_argument("--far-only-until", dest="far_only_until", type=int)
    sp.add_argument("--lambda-far", dest="lambda_far", type=float)
    sp.add_argument("--lambda-near", dest="lambda_near", type=float)
    sp.add_argument("--lambda-proj", dest="lambda_proj", type=float)
    sp.add_argument("--lr0", type=float)
    sp.add_argument("--far-grad-mode", dest="far_grad_mode", choices=["first_order", "full"])
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    sp.add_argument("--arch", type=_json_arg, help='e.g. \'{"hidden_width": 64}\'')
    sp.add_argument("--sampler", type=_json_arg, help='e.g. \'{"T": 0.01}\'')

    sp = sub.add_parser("extract", help="extract a mesh and surface points")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--res", type=int)
    sp.add_argument("--iso-band", dest="iso_band", type=float)
    sp.add_argument("--points", type=int, help="random points to pull onto the surface (0 to skip)")
    sp.add_argument("--residual-threshold", dest="residual_threshold", type=float)

    sp = sub.add_parser("deform", help="pull a point cloud onto the zero set step by step")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--points", help="xyz file; default: random points in the bbox")
    sp.add_argument("--n", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--fraction", type=float)

    sp = sub.add_parser("eval", help="score a field against an analytic oracle")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle")
    sp.add_argument("--gt")
    sp.add_argument("--res", type=int)
    sp.add_argument("--band", type=float)
    sp.add_argument("--mesh-res", dest="mesh_res", type=int)
    sp.add_argument("--points", type=int)

    sp = sub.add_parser("export-field", help="dump field samples as a float32 volume")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--res", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_cfg = load_config(args.config, command) if args.config else {}
        threads = flags.get("threads") or file_cfg.get("threads")
        cfg = merge_config(command, file_cfg, flags)
    except UsageError as e:
        print(f"udfforge {command}: error: {e}", file=sys.stderr)
        return 2
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return COMMANDS[command](cfg)
        return COMMANDS[command](cfg)
    except UsageError as e:
        print(f"udfforge {command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure inside a module
        log.debug("failure", exc_info=True)
        print(f"udfforge {command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
