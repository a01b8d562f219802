"""``teso`` command-line front end.

Exit status: 0 on success, 2 on usage errors (bad flags, missing input
files), 1 when the pipeline itself fails. An optional JSON ``--config``
file supplies defaults for any long flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("teso")

MEMORY_ENV = "TESO_MAX_MEMORY_MB"


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _patch_sizes(text: str) -> dict[int, int]:
    """``6:12,7:8`` -> {6: 12, 7: 8}."""
    out = {}
    try:
        for item in text.split(","):
            l, m = item.split(":")
            out[int(l)] = int(m)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected level:M pairs, got {text!r}") from None
    return out


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--config", type=Path, default=None, help="JSON file with flag defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_build_flags(p: argparse.ArgumentParser):
    p.add_argument("--tau", type=float, default=66.0, help="D1-PSNR split threshold in dB")
    p.add_argument("--levels", type=_int_list, default=None, help="leaf levels, e.g. 6,7,8")
    p.add_argument("--patch-sizes", type=_patch_sizes, default=None, help="M overrides, e.g. 6:12,7:8,8:4")
    p.add_argument("--k", type=int, default=16, help="neighbors for normal estimation")
    p.add_argument("--K", dest="K", type=int, default=3, help="neighbors for texture sampling")


def _add_view_flags(p: argparse.ArgumentParser):
    p.add_argument("--res", type=int, default=1024, help="square image side in pixels")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=2.75, help="trajectory radius in meters")
    p.add_argument("--perturb", type=float, default=1.0, help="radius perturbation in meters")
    p.add_argument("--fov", type=float, default=45.0)
    p.add_argument("--background", type=_float_list, default=(0.0, 0.0, 0.0))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="teso", description="Textured surfel octree toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normals", help="estimate normals for a PLY cloud")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--depth", type=int, default=None)
    _add_common(p)

    for name, helptext in (("build", "build a TeSO (lossless texture) from a PLY cloud"),
                           ("encode", "build, quantize and code a PLY cloud into a bitstream")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("input", type=Path)
        p.add_argument("output", type=Path)
        p.add_argument("--depth", type=int, default=None)
        _add_build_flags(p)
        if name == "encode":
            p.add_argument("--qt", type=int, default=10)
            p.add_argument("--codec", choices=("internal-dct", "external-raw", "none"), default="internal-dct")
        _add_common(p)

    p = sub.add_parser("decode", help="decode a bitstream into surfels and packed texture images")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, help="output directory")
    p.add_argument("--ply", action="store_true", help="also write texture pixels as a colored PLY")
    _add_common(p)

    p = sub.add_parser("render", help="render a bitstream to PNG")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, help="PNG file (single camera) or directory (trajectory)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--camera", type=_float_list, default=None, help="px,py,pz,lx,ly,lz in voxels")
    g.add_argument("--trajectory", nargs="?", const="", default=None,
                   help="trajectory file; without a value, one is generated from --frames/--seed")
    _add_view_flags(p)
    _add_common(p)

    p = sub.add_parser("trajectory", help="write a perturbed circular camera trajectory")
    p.add_argument("output", type=Path)
    p.add_argument("--depth", type=int, default=10, help="grid depth used to place the orbit center")
    _add_view_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="rate-distortion sweep to CSV")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--tau-set", type=_float_list, default=(60.0, 62.0, 64.0, 66.0))
    p.add_argument("--qt-set", type=_int_list, default=(10, 25, 40))
    p.add_argument("--levels", type=_int_list, default=None)
    p.add_argument("--codec", choices=("internal-dct", "external-raw"), default="internal-dct")
    _add_view_flags(p)
    _add_common(p)

    p = sub.add_parser("info", help="print header fields and per-section sizes")
    p.add_argument("input", type=Path)
    p.add_argument("--json", action="store_true")
    _add_common(p)
    return ap


# --------------------------------------------------------------------------- setup helpers


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        cfg = json.loads(args.config.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    # re-parse with config values as defaults so explicit flags still win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(k.replace("-", "_") for k in cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    conv = {}
    for a in sub._actions:
        key = a.dest
        for k in (key, key.replace("_", "-")):
            if k in cfg:
                v = cfg[k]
                if isinstance(v, list):
                    v = tuple(v)
                if a.type is _patch_sizes and isinstance(v, dict):
                    v = {int(kk): int(vv) for kk, vv in v.items()}
                conv[key] = v
    sub.set_defaults(**conv)
    return parser.parse_args(argv)


def _set_threads(n: int | None):
    import numba

    if n is None:
        return
    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"--threads must be in [1, {numba.config.NUMBA_NUM_THREADS}]")
    numba.set_num_threads(n)


def _cap_memory():
    val = os.environ.get(MEMORY_ENV)
    if not val:
        return
    try:
        mb = int(val)
    except ValueError:
        raise UsageError(f"{MEMORY_ENV} must be an integer number of megabytes") from None
    import resource

    limit = mb * 1024 * 1024
    soft, hard = resource.getrlimit(resource.RLIMIT_AS)
    if hard != resource.RLIM_INFINITY:
        limit = min(limit, hard)
    resource.setrlimit(resource.RLIMIT_AS, (limit, hard))


def _need_file(path: Path):
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")


def _check_args(args):
    if hasattr(args, "input"):
        _need_file(args.input)
    if getattr(args, "res", 1) < 1:
        raise UsageError("--res must be positive")
    if getattr(args, "frames", 1) < 1:
        raise UsageError("--frames must be positive")
    if getattr(args, "camera", None) is not None and len(args.camera) != 6:
        raise UsageError("--camera takes six numbers: px,py,pz,lx,ly,lz")
    if len(getattr(args, "background", (0, 0, 0))) != 3:
        raise UsageError("--background takes three numbers")
    if getattr(args, "trajectory", None):
        _need_file(Path(args.trajectory))
    qts = [getattr(args, "qt", 10)] + list(getattr(args, "qt_set", ()))
    if any(not 1 <= q <= 63 for q in qts):
        raise UsageError("Qt must lie in [1, 63]")


def _cameras(args, depth: int):
    from .renderer import make_trajectory, read_trajectory

    if getattr(args, "trajectory", None):
        return read_trajectory(args.trajectory, args.res)
    half = float(1 << (depth - 1))
    return make_trajectory(args.frames, radius=args.radius, fov=args.fov, perturb=args.perturb,
                           center=(half, half, half), seed=args.seed, scale=(1 << depth) / 1.8,
                           width=args.res, height=args.res)


def _read_cloud(args):
    from .core.ply import read_ply

    return read_ply(args.input, depth=getattr(args, "depth", None))


# --------------------------------------------------------------------------- commands


def cmd_normals(args) -> int:
    from .builder import estimate_normals
    from .core.ply import write_ply

    cloud = estimate_normals(_read_cloud(args), k=args.k)
    write_ply(cloud, args.output)
    log.info("wrote %d points with normals to %s", len(cloud), args.output)
    return 0


def _encode(args, codec: str, qt: int) -> int:
    from .pipeline import EncoderSettings, encode_teso

    cloud = _read_cloud(args)
    settings = EncoderSettings(tau=args.tau, levels=args.levels, qt=qt, texture_codec=codec, K=args.K,
                               patch_sizes=args.patch_sizes)
    if cloud.normals is None:
        from .builder import estimate_normals

        cloud = estimate_normals(cloud, k=args.k)
    data, report = encode_teso(cloud, settings)
    args.output.write_bytes(data)
    print(f"{args.output}: {len(data)} bytes, {report.n_points} points, {report.bpp:.4f} bpp, "
          f"{report.tree.n_leaves} leaves")
    return 0


def cmd_build(args) -> int:
    return _encode(args, "external-raw", 0)


def cmd_encode(args) -> int:
    return _encode(args, args.codec, args.qt)


def cmd_decode(args) -> int:
    from .pipeline import decode_teso
    from .texture import export_packed, pack_patches, rasterize_colored_points

    tree = decode_teso(args.input.read_bytes())
    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    flat = tree.flat()
    np.savez(out / "surfels.npz", depth=tree.depth, leaf_levels=np.asarray(tree.leaf_levels),
             levels=flat.levels, codes=flat.codes, centers=flat.centers, normals=flat.normals, radii=flat.radii)
    if tree.has_patches:
        export_packed([pack_patches(tree, l) for l in tree.leaf_levels], out)
        if args.ply:
            from .core.ply import write_ply

            write_ply(rasterize_colored_points(tree), out / "texture_points.ply")
    elif args.ply:
        raise UsageError("--ply needs a bitstream with texture")
    print(f"{out}: {tree.n_leaves} surfels over levels {list(tree.leaf_levels)}")
    return 0


def cmd_render(args) -> int:
    from .core.container import parse
    from .pipeline import decode_teso
    from .renderer import Camera, prepare_scene, render, save_png

    data = args.input.read_bytes()
    depth = parse(data).header.depth
    scene = prepare_scene(decode_teso(data))
    if args.camera is not None:
        c = args.camera
        cam = Camera(np.array(c[:3]), np.array(c[3:]), fov=args.fov, width=args.res, height=args.res)
        save_png(render(scene, cam, args.background), args.output)
        print(args.output)
        return 0
    cams = _cameras(args, depth)
    args.output.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        save_png(render(scene, cam, args.background), args.output / f"frame_{i:03d}.png")
    print(f"{args.output}: {len(cams)} frames")
    return 0


def cmd_trajectory(args) -> int:
    from .renderer import write_trajectory

    write_trajectory(_cameras(args, args.depth), args.output)
    print(args.output)
    return 0


def cmd_eval(args) -> int:
    from .evalkit import convex_hull, rd_sweep, write_csv

    cloud = _read_cloud(args)
    cams = _cameras(args, cloud.depth)
    pts = rd_sweep(cloud, taus=args.tau_set, qts=args.qt_set, cameras=cams, codec=args.codec, levels=args.levels,
                   background=args.background)
    write_csv(pts, args.output)
    hull = convex_hull(pts)
    print(f"{args.output}: {len(pts)} points, {len(hull)} on the hull")
    return 0


def cmd_info(args) -> int:
    from .pipeline import container_info

    info = container_info(args.input.read_bytes())
    if args.json:
        print(json.dumps(info, indent=2))
        return 0
    levels = info["leaf_levels"]
    print(f"depth={info['depth']} l_min={min(levels)} l_max={max(levels)} levels={levels}")
    print(f"patch_sizes={info['patch_sizes']} tau={info['tau']:g} texture_codec={info['texture_codec']} "
          f"qt={info['qt']}")
    print(f"n_points={info['n_points']} total_bytes={info['total_bytes']} bpp={info['bpp']:.4f}")
    for kind, n in sorted(info["section_bytes"].items()):
        print(f"  {kind:<11s}{n:>10d} bytes")
    return 0


COMMANDS = {
    "normals": cmd_normals, "build": cmd_build, "encode": cmd_encode, "decode": cmd_decode,
    "render": cmd_render, "trajectory": cmd_trajectory, "eval": cmd_eval, "info": cmd_info,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as e:  # argparse reports usage errors itself
            return int(e.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _check_args(args)
        _set_threads(args.threads)
        _cap_memory()
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"teso: error: {e}", file=sys.stderr)
        return 2
    except MemoryError:
        print(f"teso: error: out of memory (limit from {MEMORY_ENV}?)", file=sys.stderr)
        return 1
    except Exception as e:  # pipeline failure
        print(f"teso: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
