"""Command-line interface.

Commands::

    fit-group     learn a template from a population of images
    fit           register one image to a learned template
    pairwise      compose two subjects' deformations through the template
    warp-labels   resample a label volume through a deformation
    overlap       true-positive-rate overlap table between two label volumes
    synth         sample a synthetic population from a phantom model
    elbo-trace    per-level summary of an ELBO trace
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("groupreg")


def add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model settings")
    g.add_argument("--classes", type=int, default=11, help="stored tissue classes K")
    g.add_argument("--mix-weight", type=float, default=0.8,
                   help="weight of the true Hessian against the bound (0..1)")
    g.add_argument("--velocity-reg", type=float, nargs=5, default=(2e-4, 0.0, 0.4, 0.1, 0.4),
                   metavar=("ABS", "MEM", "BEND", "MU", "LAMBDA"))
    g.add_argument("--template-reg", type=float, nargs=3, default=(1e-2, 0.5, 0.0),
                   metavar=("ABS", "MEM", "BEND"))
    g.add_argument("--bias-reg", type=float, default=1e5)
    g.add_argument("--shooting-steps", type=int, default=8)
    g.add_argument("--schedule", default="8:8,4:8,2:8,1:16",
                   help="comma-separated voxel_size:iterations, coarsest first")
    g.add_argument("--bound-classes", choices=("K", "K+1"), default="K+1")
    g.add_argument("--cg-iterations", type=int, default=32)
    g.add_argument("--cg-tolerance", type=float, default=1e-4)
    g.add_argument("--rigid-trust", type=float, default=1.0,
                   help="largest rigid displacement per update, in level voxels")
    g.add_argument("--no-bias", action="store_true", help="do not estimate bias fields")


def config_from_args(args):
    from .fit import FitConfig, PyramidSchedule
    return FitConfig(classes=args.classes, mix_weight=args.mix_weight,
                     velocity_reg=tuple(args.velocity_reg), template_reg=tuple(args.template_reg),
                     bias_reg=args.bias_reg, shooting_steps=args.shooting_steps,
                     schedule=PyramidSchedule.parse(args.schedule), seed=args.seed,
                     bound_classes=args.bound_classes, cg_iterations=args.cg_iterations,
                     cg_tolerance=args.cg_tolerance, rigid_trust=args.rigid_trust,
                     estimate_bias=not args.no_bias, threads=args.threads)


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _save_result(result, out: Path):
    from .bundle import save_subject
    for s in result.subjects:
        save_subject(out / "subjects" / s.name, s, result.config)
    _write_text(out / "elbo.csv", result.trace_csv())
    if result.warnings:
        _write_text(out / "warnings.txt", "\n".join(result.warnings) + "\n")


def _stem(path) -> str:
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def cmd_fit_group(args):
    from .bundle import ModelBundle
    from .fit import fit_groupwise
    from .nifti import read_volume
    config = config_from_args(args)
    images = [read_volume(p) for p in args.images]
    names = [_stem(p) for p in args.images]
    if len(set(names)) != len(names):
        names = [f"{i:02d}_{n}" for i, n in enumerate(names)]
    result = fit_groupwise(images, config, names=names)
    out = Path(args.out)
    ModelBundle.from_result(result).save(out / "model")
    _save_result(result, out)
    print(f"wrote model and {len(names)} subjects to {out}")


def cmd_fit(args):
    from .bundle import ModelBundle
    from .fit import fit_to_template
    from .nifti import read_volume
    model = ModelBundle.load(args.model)
    config = config_from_args(args)
    image = read_volume(args.image)
    result = fit_to_template(image, model.template, model.hyper, config)
    result.subjects[0].name = _stem(args.image)
    out = Path(args.out)
    _save_result(result, out)
    print(f"wrote {out}")


def cmd_pairwise(args):
    from .bundle import load_subject_maps
    from .evaluate import compose_pairwise
    from .field import OrientedVolume
    from .nifti import write_volume
    _, src_inv, src_items = load_subject_maps(args.source)
    tgt_fwd, _, tgt_items = load_subject_maps(args.target)
    d = compose_pairwise(src_inv, tgt_fwd)
    descrip = f"groupreg pairwise cfg={src_items['config_hash']}"
    write_volume(args.out, OrientedVolume(d.map, d.affine), np.float32, descrip)
    print(f"wrote {args.out}")


def cmd_warp_labels(args):
    from .evaluate import warp_labels
    from .field import OrientedVolume
    from .nifti import read_volume, write_volume
    labels = read_volume(args.labels)
    d = read_volume(args.deformation)
    if d.channels != 3:
        raise SystemExit("deformation must have 3 channels")
    out = warp_labels(labels.data[..., 0].astype(np.int64), d.data)
    write_volume(args.out, OrientedVolume(out.astype(np.int32), d.affine), np.int32,
                 "groupreg warp-labels")
    print(f"wrote {args.out}")


OVERLAP_HEADER = ["region", "matched", "target_size", "tpr", "pooled_size_weighted",
                  "pooled_unweighted"]


def overlap_table(ov):
    rows = []
    for r in ov.regions:
        t = ov.tpr(r)
        rows.append([r, ov.matched[r], ov.size[r], "" if t is None else repr(t), "", ""])
    present = ov.present
    rows.append(["all", sum(ov.matched[r] for r in present), sum(ov.size[r] for r in present),
                 "", repr(ov.pooled), repr(ov.mean)])
    return rows


def cmd_overlap(args):
    from .evaluate import tpr_overlap
    from .nifti import read_volume
    warped = read_volume(args.warped).data[..., 0]
    target = read_volume(args.target).data[..., 0]
    regions = [int(r) for r in args.regions.split(",")] if args.regions else None
    ov = tpr_overlap(warped, target, regions)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OVERLAP_HEADER)
        w.writerows(overlap_table(ov))
    finally:
        if args.out:
            fh.close()


def cmd_synth(args):
    from .bundle import ModelBundle, provenance, save_deformation
    from .field import OrientedVolume
    from .fit import FitConfig, PyramidSchedule
    from .nifti import write_volume
    from .synth import default_appearance, make_phantom_template, synth_generate
    config = FitConfig(classes=args.classes, seed=args.seed,
                       schedule=PyramidSchedule.from_factors(1.0, [2, 1], [8, 12]))
    out = Path(args.out)
    template = make_phantom_template([args.shape] * 3, args.classes, seed=args.seed)
    gw = default_appearance(args.classes)
    ModelBundle(template, gw, config).save(out / "truth_model")
    k = args.classes
    argmax = np.argmax(np.concatenate([template.data, np.zeros(template.shape + (1,))], -1), -1)
    labels = np.where(argmax == k, 0, argmax + 1).astype(np.int32)
    write_volume(out / "template_labels.nii", OrientedVolume(labels, template.affine), np.int32,
                 provenance(config))
    for i in range(args.subjects):
        s = synth_generate(template, gw, config, seed=args.seed * 1000 + i,
                           displacement=args.displacement)
        d = out / f"subject_{i:02d}"
        d.mkdir(parents=True, exist_ok=True)
        write_volume(d / "image.nii", s.image, np.float32, provenance(config))
        write_volume(d / "labels.nii", s.labels, np.int32, provenance(config))
        save_deformation(d / "forward_true.nii", s.forward, config)
    print(f"wrote {args.subjects} subjects to {out}")


TRACE_SUMMARY_HEADER = ["level", "steps", "first", "last", "max_decrease", "monotone"]


def summarise_trace(rows, tolerance=1e-6):
    """Per-level first/last ELBO and the largest relative decrease."""
    out = []
    levels = sorted({int(r["level"]) for r in rows})
    for lv in levels:
        e = np.array([float(r["elbo"]) for r in rows if int(r["level"]) == lv])
        drops = -np.diff(e) / np.maximum(np.abs(e[:-1]), 1e-300) if len(e) > 1 else np.zeros(1)
        worst = max(float(drops.max()), 0.0) + 0.0
        out.append([lv, len(e), repr(float(e[0])), repr(float(e[-1])), repr(worst),
                    worst <= tolerance])
    return out


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def cmd_elbo_trace(args):
    rows = read_trace(args.trace)
    if not rows:
        raise SystemExit("empty trace")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(TRACE_SUMMARY_HEADER)
    w.writerows(summarise_trace(rows, args.tolerance))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupreg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(q, out_help):
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--threads", type=int, default=1,
                       help="worker threads for per-subject updates")
        q.add_argument("--out", required=out_help is not None, help=out_help)

    q = sub.add_parser("fit-group", help="learn a template from several images")
    q.add_argument("images", nargs="+")
    add_config_args(q)
    common(q, "output directory")
    q.set_defaults(func=cmd_fit_group)

    q = sub.add_parser("fit", help="register one image to a learned template")
    q.add_argument("image")
    q.add_argument("--model", required=True, help="model directory written by fit-group")
    add_config_args(q)
    common(q, "output directory")
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("pairwise", help="target-to-source map through the template")
    q.add_argument("--source", required=True, help="subject directory of the source")
    q.add_argument("--target", required=True, help="subject directory of the target")
    common(q, "output deformation (.nii)")
    q.set_defaults(func=cmd_pairwise)

    q = sub.add_parser("warp-labels", help="nearest-neighbour label resampling")
    q.add_argument("labels")
    q.add_argument("--deformation", required=True)
    common(q, "output label volume (.nii)")
    q.set_defaults(func=cmd_warp_labels)

    q = sub.add_parser("overlap", help="TPR overlap table (CSV)")
    q.add_argument("warped")
    q.add_argument("target")
    q.add_argument("--regions", help="comma-separated labels (default: all nonzero)")
    common(q, None)
    q.set_defaults(func=cmd_overlap)

    q = sub.add_parser("synth", help="sample a synthetic population")
    q.add_argument("--subjects", type=int, default=4)
    q.add_argument("--shape", type=int, default=24)
    q.add_argument("--classes", type=int, default=3)
    q.add_argument("--displacement", type=float, default=1.5,
                   help="largest velocity component in voxels")
    common(q, "output directory")
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("elbo-trace", help="summarise an ELBO trace CSV per level")
    q.add_argument("trace")
    q.add_argument("--tolerance", type=float, default=1e-6)
    common(q, None)
    q.set_defaults(func=cmd_elbo_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
