"""Batch command line front-end.

Exit codes: 0 success, 1 configuration/usage/invalid input, 2 I/O,
3 empty or degenerate result. Logs go to stderr; stdout only carries a
JSON report when ``--stdout`` is given (or no ``--out`` was set where a
report is the only product).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import annotations as ann_io
from . import eval3d, oks, registration, synth
from .crop import CropConfig, DirectoryImages, generate_subsets
from .depth import read_depth, write_depth
from .errors import CloseKPError, ConfigError, DegenerateError, InsufficientCorrespondencesError
from .geometry import CAMERA, load_intrinsics, load_transform, save_transform
from .layouts import REGISTRY, get_layout
from .lift import LiftStatus, NeighborhoodSpec, lift_person
from .reporting import dumps_csv, dumps_json, envelope

log = logging.getLogger("closekp")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_EMPTY = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _vec3(text):
    vals = _floats(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return vals


def _jobs(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return n


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file supplying any flag of the subcommand")
    common.add_argument("--jobs", type=_jobs, default=1, help="worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps so reruns are byte-identical")
    common.add_argument("--stdout", action="store_true", help="print the JSON report to stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="closekp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    p = subs["crop"] = sub.add_parser("crop", parents=[common],
                                      help="generate Basic/Headless crop datasets")
    p.add_argument("--annotations")
    p.add_argument("--images")
    p.add_argument("--out")
    p.add_argument("--layout", default="halpe136", choices=sorted(REGISTRY))
    p.add_argument("--min-area", type=float, default=20_000)
    p.add_argument("--headless", action="store_true", help="also produce the Headless subset")
    p.add_argument("--no-basic", action="store_true", help="skip writing the Basic subset")
    p.add_argument("--padding", type=float, default=0.0)
    p.add_argument("--head-margin", type=float, default=0.0)
    p.set_defaults(func=cmd_crop, required=("annotations", "images", "out"))

    p = subs["eval2d"] = sub.add_parser("eval2d", parents=[common], help="OKS AP/AR evaluation")
    p.add_argument("--gt")
    p.add_argument("--dt")
    p.add_argument("--layout", default="halpe136", choices=sorted(REGISTRY))
    p.add_argument("--group", action="append",
                   choices=["body", "hand", "face", "left_hand", "right_hand"])
    p.add_argument("--kappas", help="kappa/scale-rule JSON config")
    p.add_argument("--thresholds", type=_floats)
    p.add_argument("--scale-rule", choices=oks.SCALE_RULES)
    p.add_argument("--by-category", action="store_true")
    p.add_argument("--interpolated", action="store_true", help="add 101-point interpolated AP")
    p.add_argument("--out", help="output directory for eval2d.json / eval2d.csv")
    p.set_defaults(func=cmd_eval2d, required=("gt", "dt"))

    p = subs["lift"] = sub.add_parser("lift", parents=[common], help="lift detections to 3D")
    p.add_argument("--depth-dir")
    p.add_argument("--detections")
    p.add_argument("--intrinsics")
    p.add_argument("--layout", default="coco17", choices=sorted(REGISTRY))
    p.add_argument("--conf", type=float, default=0.1)
    p.add_argument("--transform", help="camera -> target rigid transform JSON")
    p.add_argument("--window", choices=["rect", "disc"], default="rect")
    p.add_argument("--min-valid-fraction", type=float, default=0.1)
    p.add_argument("--fps", type=float, default=30.0,
                   help="timestamp = image_id / fps unless the detection carries 't'")
    p.add_argument("--out", help="trajectory JSON-lines output")
    p.set_defaults(func=cmd_lift, required=("depth_dir", "detections", "intrinsics", "out"))

    p = subs["register"] = sub.add_parser("register", parents=[common],
                                          help="rigid transform from point pairs")
    p.add_argument("--pairs")
    p.add_argument("--anchor", type=_vec3, help="x,y,z of the camera marker (target frame)")
    p.add_argument("--anchor-mode", choices=["replace", "reestimate"], default="replace",
                   help="replace: keep the fitted rotation; reestimate: refit rotation with t fixed")
    p.add_argument("--source", default=CAMERA)
    p.add_argument("--target", default="mocap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_register, required=("pairs", "out"))

    p = subs["eval3d"] = sub.add_parser("eval3d", parents=[common], help="3D keypoint evaluation")
    p.add_argument("--mode", choices=["relative", "absolute"], default="relative")
    p.add_argument("--traj")
    p.add_argument("--mocap")
    p.add_argument("--pairing")
    p.add_argument("--gt-traj", help="ground-truth trajectory instead of --mocap/--pairing")
    p.add_argument("--transform", help="rigid transform applied to --traj first")
    p.add_argument("--layout", default="coco17", choices=sorted(REGISTRY))
    p.add_argument("--bins", type=_floats, default=list(eval3d.DEFAULT_BINS))
    p.add_argument("--conf", type=_floats, default=[0.1, 0.3])
    p.add_argument("--exclude", default="shoulders",
                   help="'shoulders', 'none' or comma-separated keypoint indices")
    p.add_argument("--tolerance", type=float, default=eval3d.DEFAULT_TOLERANCE)
    p.add_argument("--out", help="output directory for eval3d.json / eval3d.csv")
    p.set_defaults(func=cmd_eval3d, required=("traj",))

    p = subs["synth"] = sub.add_parser("synth", parents=[common], help="render a synthetic scene")
    p.add_argument("--scene")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["png", "pgm"], default="png")
    p.set_defaults(func=cmd_synth, required=("scene", "out"))
    return parser, subs


def _parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        sp = subs[args.command]
        valid = {a.dest for a in sp._actions} - {"help", "config"}
        defaults = {}
        for key, value in cfg.items():
            dest = str(key).lstrip("-").replace("-", "_")
            if dest not in valid:
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            defaults[dest] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [f"--{name.replace('_', '-')}" for name in args.required if getattr(args, name) is None]
    if missing:
        raise UsageError(f"{args.command}: missing {', '.join(missing)}")
    return args


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _emit(args, doc, out_dir=None, name=None, csv_columns=None, csv_rows=None):
    text = dumps_json(doc)
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir / f"{name}.json", text)
        if csv_columns is not None:
            _write(out_dir / f"{name}.csv", dumps_csv(csv_columns, csv_rows))
    if args.stdout or out_dir is None:
        sys.stdout.write(text)


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- subcommands ------------------------------------------------------------

def cmd_crop(args) -> int:
    from PIL import Image

    layout = get_layout(args.layout)
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        raise FileNotFoundError(f"images directory not found: {images_dir}")
    dataset = ann_io.load_dataset(args.annotations, layout)
    cfg = CropConfig(min_area=args.min_area, head_margin=args.head_margin, padding=args.padding)
    result = generate_subsets(dataset, DirectoryImages(images_dir), cfg,
                              headless=args.headless, jobs=args.jobs)
    out = Path(args.out)
    subsets = []
    if not args.no_basic:
        subsets.append(("basic", result.basic, result.basic_items))
    if args.headless:
        subsets.append(("headless", result.headless, result.headless_items))
    for name, ds, items in subsets:
        root = out / name
        (root / "images").mkdir(parents=True, exist_ok=True)
        for item in items:
            Image.fromarray(item.pixels).save(root / "images" / item.image.file_name)
        ann_io.save_dataset(root / "annotations.json", ds)
        _write(root / "provenance.json", dumps_json([it.provenance for it in items]))
    summary = envelope("crop-summary", {
        "layout": layout.name,
        "config": {"min_area": cfg.min_area, "padding": cfg.padding,
                   "head_margin": cfg.head_margin, "headless": args.headless},
        "counts": result.counts,
    }, args.deterministic)
    _emit(args, summary, out, "summary")
    produced = sum(len(items) for _, _, items in subsets)
    log.info("crop: %d basic, %d headless", result.counts["basic_accepted"],
             result.counts["headless_accepted"])
    return EXIT_OK if produced else EXIT_EMPTY


def cmd_eval2d(args) -> int:
    layout = get_layout(args.layout)
    dataset = ann_io.load_dataset(args.gt, layout)
    dets = ann_io.load_detections(args.dt, layout)
    params = oks.load_oks_params(layout, args.kappas, thresholds=args.thresholds,
                                 scale_rule=args.scale_rule)
    groups = args.group or ["body"]
    reports = [oks.evaluate(dataset, dets, params, g, by_category=args.by_category,
                            interpolated=args.interpolated, jobs=args.jobs) for g in groups]
    doc = envelope("eval2d", {
        "layout": layout.name,
        "scale_rule": params.scale_rule,
        "thresholds": list(params.thresholds),
        "reports": [r.to_dict() for r in reports],
    }, args.deterministic)
    rows = [row for r in reports for row in r.csv_rows()]
    _emit(args, doc, args.out, "eval2d", oks.CSV_COLUMNS, rows)
    return EXIT_EMPTY if all(r.empty for r in reports) else EXIT_OK


def _depth_path(depth_dir: Path, image_id) -> Path:
    stems = [str(image_id)]
    if isinstance(image_id, int):
        stems.insert(0, f"{image_id:06d}")
    for stem in stems:
        for ext in (".png", ".pgm"):
            p = depth_dir / f"{stem}{ext}"
            if p.is_file():
                return p
    raise FileNotFoundError(f"no depth raster for image {image_id!r} in {depth_dir}")


def cmd_lift(args) -> int:
    layout = get_layout(args.layout)
    intr = load_intrinsics(args.intrinsics)
    transform = load_transform(args.transform) if args.transform else None
    spec = NeighborhoodSpec(min_valid_fraction=args.min_valid_fraction, window=args.window)
    depth_dir = Path(args.depth_dir)
    if not depth_dir.is_dir():
        raise FileNotFoundError(f"depth directory not found: {depth_dir}")
    dets = ann_io.load_detections(args.detections, layout)
    best = {}
    for d in dets:
        if d.image_id not in best or d.score > best[d.image_id].score:
            best[d.image_id] = d
    try:
        image_ids = sorted(best)
    except TypeError:
        image_ids = list(best)

    def run(image_id):
        det = best[image_id]
        try:
            depth = read_depth(_depth_path(depth_dir, image_id))
        except OSError as exc:
            log.warning("%s", exc)
            return image_id, det, None
        return image_id, det, lift_person(depth, det, layout, spec, intr, args.conf)

    status_counts = {s.value: 0 for s in LiftStatus}
    status_counts["lifted"] = 0
    frames, missing_depth = [], 0
    for image_id, det, lifted in _map(run, image_ids, args.jobs):
        if lifted is None:
            missing_depth += 1
            continue
        t = det.extra.get("t", image_id / args.fps if isinstance(image_id, (int, float)) else 0.0)
        kps = {}
        for k, res in lifted.items():
            if isinstance(res, LiftStatus):
                status_counts[res.value] += 1
                continue
            status_counts["lifted"] += 1
            xyz = res.as_array()
            if transform is not None:
                xyz = transform.apply(xyz)
            kps[k] = (xyz, float(det.keypoints[k, 2]))
        frames.append(eval3d.TrajFrame(float(t), kps))
    frames.sort(key=lambda f: f.t)
    traj = eval3d.Trajectory(frames, transform.target if transform else CAMERA)
    out = Path(args.out)
    _write(out, eval3d.format_trajectory(traj))
    summary = envelope("lift-summary", {
        "frames": len(frames), "missing_depth": missing_depth, "keypoints": status_counts,
        "frame_id": traj.frame_id, "conf_threshold": args.conf,
    }, args.deterministic)
    _write(out.with_name(out.name + ".summary.json"), dumps_json(summary))
    if args.stdout:
        sys.stdout.write(dumps_json(summary))
    return EXIT_OK if status_counts["lifted"] else EXIT_EMPTY


def cmd_register(args) -> int:
    corr = registration.load_correspondences(args.pairs, source_frame=args.source,
                                             target_frame=args.target)
    fitted = registration.estimate_rigid(corr)
    method = "svd"
    transform = fitted
    if args.anchor is not None:
        if args.anchor_mode == "replace":
            transform = registration.fix_translation(fitted, args.anchor)
            method = "svd+anchor"
        else:
            transform = registration.estimate_rotation_with_translation(corr, args.anchor)
            method = "rotation-with-fixed-anchor"
    rms = registration.residual_rms(corr, transform)
    extra = {"method": method, "n_pairs": len(corr), "residual_rms": rms}
    save_transform(args.out, transform, **extra)
    log.info("register: %s on %d pairs, residual rms %.3g m", method, len(corr), rms)
    if args.stdout:
        sys.stdout.write(dumps_json(envelope("register", {**transform.to_dict(), **extra},
                                             args.deterministic)))
    return EXIT_OK


def _excluded(spec: str):
    spec = str(spec).strip().lower()
    if spec in ("", "none"):
        return ()
    if spec == "shoulders":
        from .layouts import SHOULDERS

        return SHOULDERS
    try:
        return tuple(int(x) for x in spec.split(","))
    except ValueError:
        raise ConfigError(f"--exclude expects 'shoulders', 'none' or indices, got {spec!r}") from None


def _bin_key(b):
    return f"within_{b:g}"


def cmd_eval3d(args) -> int:
    layout = get_layout(args.layout)
    traj = eval3d.load_trajectory(args.traj)
    if args.transform:
        t = load_transform(args.transform)
        traj = traj.transformed(t)
    bins = list(args.bins)
    confs = list(args.conf)
    name = lambda k: layout.names[k] if 0 <= k < layout.total else str(k)  # noqa: E731
    columns = ["mode", "keypoint", "name", "conf", "count", "total", "detection_fraction",
               "median_distance", "missing_gt"] + [_bin_key(b) for b in bins]
    rows, payload = [], {"mode": args.mode, "bins": bins, "conf_thresholds": confs}

    if args.mode == "relative":
        for conf in confs:
            centers = eval3d.median_center(traj, conf)
            stats = eval3d.relative_stats(traj, centers, bins, conf)
            for k, s in stats.items():
                row = {"mode": "relative", "keypoint": k, "name": name(k), "conf": conf,
                       "count": s.count, "total": s.total,
                       "detection_fraction": s.detection_fraction,
                       "median_distance": s.median_distance,
                       "center": [float(c) for c in centers[k]]}
                row.update({_bin_key(b): f for b, f in zip(bins, s.fractions)})
                rows.append(row)
        payload["frames"] = len(traj)
    else:
        if args.gt_traj:
            gt = eval3d.load_trajectory(args.gt_traj)
        elif args.mocap and args.pairing:
            track = eval3d.parse_mocap_csv(Path(args.mocap).read_text(encoding="utf-8"))
            gt = eval3d.marker_ground_truth(track, eval3d.load_pairing(args.pairing))
        else:
            raise UsageError("absolute mode needs --gt-traj or --mocap with --pairing")
        assoc = eval3d.associate_by_time(traj, gt, args.tolerance)
        stats = eval3d.absolute_stats(traj, gt, assoc.pairs, bins, confs, _excluded(args.exclude))
        for s in stats:
            row = {"mode": "absolute", "keypoint": s.keypoint, "name": name(s.keypoint),
                   "conf": s.conf_threshold, "count": s.count, "total": len(assoc.pairs),
                   "median_distance": s.median_distance, "missing_gt": s.missing_gt}
            row.update({_bin_key(b): f for b, f in zip(bins, s.fractions)})
            rows.append(row)
        payload["association"] = {"pairs": len(assoc.pairs), "unpaired_detected": assoc.unpaired_a,
                                  "unpaired_gt": assoc.unpaired_b, "tolerance": args.tolerance}
    payload["rows"] = rows
    doc = envelope("eval3d", payload, args.deterministic)
    csv_rows = [{k: v for k, v in r.items() if k in columns} for r in rows]
    _emit(args, doc, args.out, "eval3d", columns, csv_rows)
    return EXIT_OK if any(r["count"] for r in rows) else EXIT_EMPTY


def cmd_synth(args) -> int:
    spec = synth.load_scene(args.scene)
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(spec.seed).spawn(spec.frames)
    projected = synth.project_keypoints(spec)

    def run(i):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        depth = synth.render_depth(spec, rng)
        det = synth.perturb_detections(spec, projected, rng, image_id=i)
        write_depth(out / "depth" / f"{i:06d}.{args.format}", depth)
        return det

    dets = _map(run, range(spec.frames), args.jobs)
    records = []
    for i, det in enumerate(dets):
        extra = dict(det.extra, t=i / spec.fps)
        records.append(ann_io.DetectionRecord(det.image_id, det.keypoints, det.score,
                                              det.category_id, extra))
    ann_io.save_detections(out / "detections.json", records)
    _write(out / "intrinsics.json", json.dumps(
        {**spec.intrinsics.to_dict(), "width": spec.width, "height": spec.height}, indent=2) + "\n")

    gt_frames = [eval3d.TrajFrame(i / spec.fps, {k: (np.array(p), 1.0)
                                                  for k, p in spec.keypoints3d.items()})
                 for i in range(spec.frames)]
    _write(out / "gt_trajectory.jsonl", eval3d.format_trajectory(eval3d.Trajectory(gt_frames)))

    markers = synth.marker_positions(spec)
    track = eval3d.MocapTrack([(i / spec.fps, markers) for i in range(spec.frames)])
    _write(out / "mocap.csv", eval3d.format_mocap_csv(track))
    _write(out / "pairing.json", json.dumps(
        {str(k): [f"k{k}a", f"k{k}b"] for k in sorted(spec.keypoints3d)}, indent=2) + "\n")
    mocap_t = spec.mocap_transform or synth.RigidTransform.identity(CAMERA, "mocap")
    save_transform(out / "camera_to_mocap.json", mocap_t)

    manifest = envelope("synth", {
        "frames": spec.frames, "seed": spec.seed, "layout": spec.layout,
        "width": spec.width, "height": spec.height, "format": args.format,
    }, args.deterministic)
    _emit(args, manifest, out, "manifest")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        args = _parse(argv)
        return args.func(args)
    except InsufficientCorrespondencesError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DegenerateError as exc:
        log.error("%s", exc)
        return EXIT_EMPTY
    except CloseKPError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except Exception as exc:  # fuzzed configs must never crash the process
        log.error("unexpected failure: %s", exc)
        log.debug("traceback", exc_info=True)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
