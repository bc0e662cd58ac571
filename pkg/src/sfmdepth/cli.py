"""Command-line entry point.

Subcommands: ``synth`` (procedural dataset), ``gen-data`` (sparse
supervision from a reconstruction), ``train``, ``predict``, ``eval``,
``gradcheck``. Exit status: 0 success, 1 usage error, 2 validation or data
error, 3 numerical failure. All settings come from ``--config`` files and
``--set section.key=value`` overrides; environment variables are never
consulted.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULT_SEED, load_config
from .errors import ConfigError, DataError, NumericalError


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def build_parser() -> Parser:
    p = Parser(prog="sfmdepth",
               description="Dense depth estimation trained from sparse "
                           "multi-view reconstructions.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config entry")
        sp.add_argument("--seed", type=int, default=None,
                        help=f"master seed (default {DEFAULT_SEED})")

    sp = sub.add_parser("synth", help="render a synthetic dataset with "
                                      "simulated multi-view supervision")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-ground-truth", action="store_true",
                    help="skip writing dense ground-truth depth arrays")
    common(sp)

    sp = sub.add_parser("gen-data", help="rasterize a reconstruction into "
                                         "training supervision")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("train", help="train the depth network")
    sp.add_argument("--data", required=True, help="gen-data output directory")
    sp.add_argument("--val-data", default=None, help="validation dataset (gen-data layout)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--serial", action="store_true",
                    help="force serial data handling (already the only mode; "
                         "kept for interface stability)")
    sp.add_argument("--verbose", action="store_true")
    common(sp)

    sp = sub.add_parser("predict", help="write depth maps for every frame")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset directory with frames/")
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("eval", help="evaluate a checkpoint against sparse "
                                     "(default) or dense ground truth")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True,
                    help="gen-data directory (sparse) or dataset with gt_depth (dense)")
    sp.add_argument("--dense", action="store_true",
                    help="evaluate against gt_depth arrays instead of sparse maps")
    sp.add_argument("--out", default=None, help="write line-delimited records here")
    common(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every "
                                          "differentiable operation")
    sp.add_argument("--instances", type=int, default=50)
    common(sp)
    return p


def _overrides(args):
    out = []
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k, v))
    return out


def _config(args):
    return load_config(args.config, _overrides(args))


def _seed(args) -> int:
    return DEFAULT_SEED if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synthetic import make_scene, simulate_sfm, write_dataset

    cfg = _config(args)
    seed = _seed(args)
    scene, traj = make_scene(seed, cfg.synth.scene)
    recon = simulate_sfm(scene, traj, cfg.synth.resolved_points(),
                         cfg.synth.noise_sigma, cfg.synth.dropout, seed)
    write_dataset(scene, traj, recon, args.out,
                  with_ground_truth=not args.no_ground_truth)
    print(f"wrote {len(recon.frames)} frames, {len(recon.points)} points "
          f"to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    import numpy as np

    from .sfm_io import filter_points, parse_reconstruction, smooth_visibility
    from .sparse_maps import generate_dataset

    cfg = _config(args)
    recon = parse_reconstruction(args.data)
    recon = filter_points(recon, cfg.data.filter_neighbors, cfg.data.filter_std)
    sigma = cfg.data.sigma
    if sigma <= 0:
        sigma = float(np.mean([p.track_length for p in recon.points]))
    recon = smooth_visibility(recon, cfg.data.smooth_window)
    manifest = generate_dataset(recon, args.out, sigma)
    dens = float(np.mean([(manifest.mask(f) > 0).mean() for f in manifest.frame_ids]))
    print(f"wrote {len(manifest.frames)} frames to {args.out} "
          f"(sigma={sigma:.2f}, mask density {dens * 100:.2f}%)")
    return 0


def cmd_train(args) -> int:
    from .sparse_maps import DatasetManifest
    from .training import train

    cfg = _config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.model.seed = args.seed
    manifest = DatasetManifest.load(args.data)
    val = DatasetManifest.load(args.val_data) if args.val_data else None
    result = train(manifest, cfg.model, cfg.train, args.out, val_manifest=val,
                   augment_cfg=cfg.augment, resume=args.resume,
                   quiet=not args.verbose)
    print(f"trained {cfg.train.epochs} epochs; final checkpoint "
          f"{result.final_checkpoint}")
    return 0


def _colorize(depth, validity):
    import matplotlib

    # normalized by the frame's own max depth; perceptually uniform map
    top = depth[validity].max() if validity.any() else 1.0
    norm = np.where(validity, depth / max(top, 1e-12), 0.0)
    rgba = matplotlib.colormaps["viridis"](norm)
    rgb = rgba[..., :3] * np.where(validity[..., None], 1.0, 0.0)
    return rgb


def cmd_predict(args) -> int:
    from .nnet import load_checkpoint, predict
    from .sfm_io import load_image, parse_reconstruction, save_image
    from .sparse_maps import write_array

    _config(args)  # surface config errors even though predict needs none
    net, _, _ = load_checkpoint(args.checkpoint)
    recon = parse_reconstruction(args.data)
    out = Path(args.out)
    for fid in recon.frame_ids:
        img = load_image(recon.image_path(fid))
        pred = predict(net, img)
        write_array(pred.values, out / "depth" / f"{fid}.dat")
        save_image(_colorize(pred.values, pred.validity), out / "viz" / f"{fid}.png")
    print(f"wrote {len(recon.frame_ids)} depth maps to {out}")
    return 0


def _metric_line(fid, m):
    return {"frame_id": fid, "abs_rel": m.abs_rel, "thresh_1_25": m.thresh_1_25,
            "thresh_1_25_sq": m.thresh_1_25_sq, "thresh_1_25_cu": m.thresh_1_25_cu,
            "n_valid": m.n_valid}


def cmd_eval(args) -> int:
    from .layers import DepthMap
    from .nnet import load_checkpoint, predict
    from .sfm_io import load_image, parse_reconstruction
    from .sparse_maps import DatasetManifest, read_array
    from .training import evaluate_dense, evaluate_sparse

    _config(args)
    net, _, _ = load_checkpoint(args.checkpoint)
    root = Path(args.data)
    rows = []
    if args.dense:
        recon = parse_reconstruction(root)
        for fid in recon.frame_ids:
            gt_path = root / "gt_depth" / f"{fid}.dat"
            if not gt_path.is_file():
                raise DataError(f"missing dense ground truth: {gt_path}")
            gt_vals = read_array(gt_path)
            gt = DepthMap(gt_vals, gt_vals > 0)
            pred = predict(net, load_image(recon.image_path(fid)))
            rows.append((fid, evaluate_dense(pred, gt)))
    else:
        manifest = DatasetManifest.load(root)
        for fid in manifest.frame_ids:
            pred = predict(net, manifest.image(fid))
            rows.append((fid, evaluate_sparse(pred, manifest.depth(fid),
                                              manifest.mask(fid))))

    header = f"{'frame':>6s} {'abs_rel':>9s} {'d<1.25':>8s} {'d<1.25^2':>9s} {'d<1.25^3':>9s} {'n':>7s}"
    print(header)
    for fid, m in rows:
        print(f"{fid:6d} {m.abs_rel:9.4f} {m.thresh_1_25:8.4f} "
              f"{m.thresh_1_25_sq:9.4f} {m.thresh_1_25_cu:9.4f} {m.n_valid:7d}")
    mean = [float(np.mean([getattr(m, f) for _, m in rows]))
            for f in ("abs_rel", "thresh_1_25", "thresh_1_25_sq", "thresh_1_25_cu")]
    print(f"{'mean':>6s} {mean[0]:9.4f} {mean[1]:8.4f} {mean[2]:9.4f} {mean[3]:9.4f}")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for fid, m in rows:
                fh.write(json.dumps(_metric_line(fid, m), sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = _seed(args)
    results = run_suite(instances=args.instances, seed=seed,
                        progress=lambda r: print(
                            f"{r.name:26s} worst_rel_err={r.worst_error:.3e} "
                            f"tol={r.tolerance:.0e} "
                            f"{'pass' if r.passed else 'FAIL'}"))
    if all(r.passed for r in results):
        print("all gradient checks passed")
        return 0
    print("gradient checks FAILED")
    return 3


COMMANDS = {
    "synth": cmd_synth,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
