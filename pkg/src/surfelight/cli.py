"""Command-line interface.

Exit codes: 0 success, 2 usage error, 1 runtime failure (the message names
the failing stage).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, lighting, metrics, relight, sh
from .errors import UsageError

log = logging.getLogger("surfelight")

# Values the method description leaves open; printed at startup of `train`.
UNPUBLISHED = (
    "lr_position", "lr_position_final", "lr_rotation", "lr_scale", "lr_opacity", "lr_albedo",
    "densify_from_iter", "densify_until_iter", "densify_grad_threshold", "prune_opacity_threshold",
    "split_scale_fraction", "max_surfels", "normal_reg_from_iter", "distortion_reg_from_iter",
    "weights.rec_unshadowed_stage2", "weights.lambda_normal", "weights.lambda_distortion", "weights.mc_samples",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _Stage:
    """Context label so runtime failures report where they happened."""

    current = "startup"

    def __call__(self, name):
        _Stage.current = name
        return self


stage = _Stage()


def _write_light_json(path, coeffs) -> None:
    doc = {"format_version": io.FORMAT_VERSION, "coeffs": np.asarray(coeffs).tolist()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _read_light_json(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["coeffs"], dtype=np.float64).reshape(3, sh.NUM_COEFFS)


def _load_config(path):
    from .trainer import TrainConfig

    if path is None:
        return TrainConfig()
    doc = json.loads(Path(path).read_text())
    doc.pop("format_version", None)
    try:
        return TrainConfig.from_json(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {path}: {exc}") from None


def _print_config(cfg, out) -> None:
    flat = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "weights"}
    flat.update({f"weights.{k}": v for k, v in dataclasses.asdict(cfg.weights).items()})
    for key in sorted(flat):
        tag = "  [unpublished default]" if key in UNPUBLISHED else ""
        print(f"config {key} = {flat[key]}{tag}", file=out)


def _buffers_out(out_dir: Path, buffers: dict, fmt: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("color", "albedo", "normal", "irradiance", "shadow", "depth"):
        if name in buffers:
            img = buffers[name]
            if name == "normal" and fmt == "png":
                img = 0.5 * (img + 1.0)
            io.write_image(out_dir / f"{name}.{fmt}", img)


def _camera(args):
    if args.camera:
        return io.load_camera(args.camera)
    if args.dataset and args.view:
        return io.load_dataset(args.dataset).by_name(args.view).camera
    raise UsageError("give --camera FILE or --dataset DIR --view NAME")


def _light_source(args):
    chosen = [x is not None for x in (args.envmap, args.image_index, getattr(args, "light", None))]
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --envmap, --image-index, --light")
    if args.envmap is not None:
        return {"envmap": io.read_pfm(args.envmap)}
    if args.image_index is not None:
        return {"image_index": args.image_index}
    return {"light": _read_light_json(args.light)}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import trainer

    stage("config")
    cfg = _load_config(args.config)
    if args.desk_scale is not None:
        cfg = dataclasses.replace(cfg, desk_scale=args.desk_scale)
    if args.iters is not None:
        cfg = dataclasses.replace(cfg, total_iters=args.iters, stage1_iters=min(cfg.stage1_iters, args.iters))
    cfg = cfg.scaled()
    _print_config(cfg, sys.stderr)
    stage("dataset")
    ds = io.load_dataset(args.dataset, invert_masks=args.invert_masks)
    out = Path(args.out)
    stage("initialization")
    if args.resume:
        state = io.load_checkpoint(out / "checkpoint")
    else:
        state = trainer.TrainState(trainer.init_scene(ds, cfg), cfg)
    batches = trainer.batches_from_dataset(ds)
    stage("training")

    def progress(it, report):
        if args.verbose and it % 100 == 0:
            print(f"iter {it} total {report.total:.6f} surfels {len(state.scene.surfels)}", file=sys.stderr)

    trainer.train(state, batches, out, progress=progress)
    print(f"checkpoint written to {out / 'checkpoint'}")
    return 0


def cmd_render(args) -> int:
    stage("loading")
    scene = io.load_scene(args.scene)
    cam = _camera(args)
    stage("rendering")
    buffers = relight.relight(scene, cam, image_index=args.image_index)
    stage("writing")
    _buffers_out(Path(args.out), buffers, args.format)
    return 0


def cmd_relight(args) -> int:
    stage("loading")
    scene = io.load_scene(args.scene)
    cam = _camera(args)
    src = _light_source(args)
    stage("rendering")
    buffers = relight.relight(scene, cam, rotate_deg=args.rotate_deg, **src)
    stage("writing")
    _buffers_out(Path(args.out), buffers, args.format)
    return 0


def cmd_shadow(args) -> int:
    stage("loading")
    scene = io.load_scene(args.scene)
    cam = _camera(args)
    src = _light_source(args)
    stage("rendering")
    coeffs = relight.resolve_light(scene, **src)
    shadowed, unshadowed = lighting.render_lit(scene.surfels, coeffs, cam)
    stage("writing")
    io.write_image(args.out, lighting.shadow_map(shadowed, unshadowed))
    return 0


def _stems(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in (".pfm", ".png"):
            if p.stem in files:
                raise UsageError(f"{directory}: two files share the name '{p.stem}'")
            files[p.stem] = p
    return files


def cmd_eval(args) -> int:
    stage("loading")
    renders, targets, masks = (_stems(Path(d)) for d in (args.renders, args.targets, args.masks))
    missing = [n for n in renders if n not in targets or n not in masks]
    if missing:
        raise UsageError(f"no target or mask for: {', '.join(missing)}")
    if not renders:
        raise UsageError(f"no images in {args.renders}")
    stage("metrics")
    rows = []
    for name in sorted(renders):
        r = io.read_image(renders[name])
        t = io.read_image(targets[name])
        m = io.read_mask(masks[name], invert=args.invert_masks)
        rows.append((name, metrics.eval_metrics(np.clip(r, 0, 1), np.clip(t, 0, 1), m)))
    table = metrics.format_table(rows)
    sys.stdout.write(table)
    if args.json:
        doc = {
            "format_version": io.FORMAT_VERSION,
            "rows": [{"name": n, **{k: round(v, 6) for k, v in rep.as_dict().items()}} for n, rep in rows],
        }
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_project_env(args) -> int:
    stage("loading")
    env = io.read_pfm(args.envmap)
    stage("projection")
    coeffs = sh.project_envmap(env)
    if args.out:
        _write_light_json(args.out, coeffs)
    else:
        print(json.dumps({"format_version": io.FORMAT_VERSION, "coeffs": coeffs.tolist()}))
    return 0


def cmd_export_env(args) -> int:
    stage("loading")
    scene = io.load_scene(args.scene)
    stage("export")
    env, clamped = relight.export_envlight(scene, args.image_index, args.height, args.width, args.divide_pi)
    io.write_pfm(args.out, env)
    print(f"wrote {args.out}; clamped {clamped} negative values")
    return 0


def cmd_fixtures(args) -> int:
    from .fixtures import FixtureSpec, make_fixture

    stage("fixture generation")
    make_fixture(args.out, FixtureSpec(seed=args.seed))
    print(f"fixture written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surfelight", description="Relightable surfel reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="optimize a scene from a dataset")
    t.add_argument("dataset")
    t.add_argument("--config", help="JSON file mirroring TrainConfig (weights nested under 'weights')")
    t.add_argument("--out", required=True)
    t.add_argument("--desk-scale", type=int, help="divide every iteration count by this")
    t.add_argument("--iters", type=int, help="override total_iters (after scaling is not applied)")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--invert-masks", action="store_true")
    t.set_defaults(func=cmd_train)

    def camera_args(q):
        q.add_argument("--camera", help="camera JSON")
        q.add_argument("--dataset", help="dataset directory (with --view)")
        q.add_argument("--view", help="dataset entry name")

    def light_args(q, with_light=False):
        q.add_argument("--envmap", help="equirectangular PFM")
        q.add_argument("--image-index", type=int, help="training-image light")
        if with_light:
            q.add_argument("--light", help="SH light JSON (as written by project-env)")

    r = sub.add_parser("render", help="render buffers under a training-image light")
    r.add_argument("scene")
    camera_args(r)
    r.add_argument("--image-index", type=int, default=0)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--format", choices=("pfm", "png"), default="pfm")
    r.set_defaults(func=cmd_render)

    rl = sub.add_parser("relight", help="render under a novel or rotated light")
    rl.add_argument("scene")
    camera_args(rl)
    light_args(rl, with_light=True)
    rl.add_argument("--rotate-deg", type=float, default=0.0, help="rotate the light about +z")
    rl.add_argument("--out", required=True, help="output directory")
    rl.add_argument("--format", choices=("pfm", "png"), default="pfm")
    rl.set_defaults(func=cmd_relight)

    sh_ = sub.add_parser("shadow", help="write the shadow map for a light")
    sh_.add_argument("scene")
    camera_args(sh_)
    light_args(sh_, with_light=True)
    sh_.add_argument("--out", required=True, help="PFM or PNG file")
    sh_.set_defaults(func=cmd_shadow)

    e = sub.add_parser("eval", help="masked metrics over matching file names")
    e.add_argument("renders")
    e.add_argument("targets")
    e.add_argument("masks")
    e.add_argument("--json", help="also write the table as JSON")
    e.add_argument("--invert-masks", action="store_true")
    e.set_defaults(func=cmd_eval)

    pe = sub.add_parser("project-env", help="project an equirectangular PFM onto SH")
    pe.add_argument("envmap")
    pe.add_argument("--out", help="JSON file (stdout when omitted)")
    pe.set_defaults(func=cmd_project_env)

    ee = sub.add_parser("export-env", help="write a learned light as an equirectangular PFM")
    ee.add_argument("scene")
    ee.add_argument("--image-index", type=int, required=True)
    ee.add_argument("--out", required=True)
    ee.add_argument("--width", type=int, default=128)
    ee.add_argument("--height", type=int, default=64)
    ee.add_argument("--divide-pi", action="store_true", help="emit radiance for a 1/pi diffuse BRDF")
    ee.set_defaults(func=cmd_export_env)

    fx = sub.add_parser("fixtures", help="write the synthetic box-and-ground dataset")
    fx.add_argument("out")
    fx.add_argument("--seed", type=int, default=0)
    fx.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    stage("arguments")
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        print(f"error during {_Stage.current}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
