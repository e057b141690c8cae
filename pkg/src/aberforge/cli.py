"""Batch command-line surface tying the pipeline together.

Exit codes: 0 success, 1 domain error, 2 usage error. All stochastic
subcommands print the effective seed; ABERFORGE_SEED overrides the default
seed when the flag is omitted.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import lenslib, optics, psf_repr, quantify, raytrace, simulate

DOMAIN_ERRORS = (
    optics.OpticsError,
    raytrace.RaytraceError,
    simulate.SimulateError,
    quantify.QuantifyError,
    lenslib.LensLibError,
    psf_repr.PSFReprError,
    FileNotFoundError,
    ValueError,
)


def _effective_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("ABERFORGE_SEED")
    return int(env) if env else 0


def _write_summary(out_path: str, subcommand: str, args: argparse.Namespace, outputs):
    summary = {
        "subcommand": subcommand,
        "outputs": [str(o) for o in outputs],
        "options": {
            k: v for k, v in vars(args).items() if k != "func" and not k.startswith("_")
        },
    }
    with open(out_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _summary_path(primary_output: str) -> str:
    return str(primary_output) + ".run.json"


# ---------------------------------------------------------------------------
# subcommand handlers

def cmd_trace(args):
    lens = optics.load_lens(args.lens)
    res = raytrace.trace_system(lens, args.field, args.wavelength, args.rays)
    np.savetxt(args.out, res.spots, delimiter=",", header="x_mm,y_mm", comments="")
    print(f"spots: {len(res.spots)}  survival: {res.survival_fraction:.4f}  "
          f"rms: {raytrace.rms_spot_radius(res.spots):.4f} um")
    _write_summary(_summary_path(args.out), "trace", args, [args.out])
    return 0


def cmd_psf(args):
    lens = optics.load_lens(args.lens)
    grid = raytrace.psf_grid(lens, args.n_fov, args.n_wave, args.rays, threads=args.threads)
    raytrace.save_psf_grid(grid, args.out)
    print(f"psf grid {grid.n_fov}x{grid.n_wave} written to {args.out}")
    _write_summary(_summary_path(args.out), "psf", args, [args.out])
    return 0


def cmd_simulate(args):
    seed = _effective_seed(args)
    print(f"seed: {seed}")
    img = simulate.load_image(args.image)
    grid = raytrace.load_psf_grid(args.psf)
    psfs = raytrace.stack_rgb(grid)
    out = simulate.render_degraded(img, psfs)
    if args.read_sigma > 0 or args.shot_scale > 0:
        out = simulate.add_sensor_noise(out, args.read_sigma, args.shot_scale, seed)
    simulate.save_image(args.out, out)
    print(f"degraded image written to {args.out}")
    _write_summary(_summary_path(args.out), "simulate", args, [args.out])
    return 0


def cmd_quantify(args):
    lens = optics.load_lens(args.lens)
    if args.psf:
        grid = raytrace.load_psf_grid(args.psf)
    else:
        grid = raytrace.psf_grid(lens, args.n_fov, args.n_wave, args.rays,
                                 threads=args.threads)
    psfs = raytrace.stack_rgb(grid)
    report = quantify.quantify_lens(lens, psfs, alpha=args.alpha, n_p=args.np)
    out = args.out or (os.path.splitext(args.lens)[0] + ".report.json")
    report.save(out)
    print(f"avg OIQ {report.average_oiq:.4f}  severity {report.severity}  "
          f"OD-Class {report.od_class}  chromatic {report.chromatic_class}")
    _write_summary(_summary_path(out), "quantify", args, [out])
    return 0


def cmd_classify(args):
    if args.report:
        report = quantify.OIQReport.load(args.report)
        values = report.per_fov_oiq
    else:
        if len(args.oiq) != 5:
            raise quantify.QuantifyError("classify needs exactly 5 OIQ values")
        values = args.oiq
    cls = quantify.od_class(values, alpha=args.alpha)
    cv, u_s = quantify.spatial_uniformity(values)
    avg = float(np.mean(values))
    print(f"avg OIQ {avg:.4f}  severity {quantify.severity_class(avg)}  "
          f"CV {cv:.4f}  U_S {u_s:.4f}  OD-Class {cls}")
    return 0


def cmd_gen_source(args):
    seed = _effective_seed(args)
    print(f"seed: {seed}")
    spec = lenslib.DesignSpec(
        element_range=(args.min_elements, args.max_elements),
        focal_range=(args.f_min, args.f_max),
        fnum_range=(args.fnum_min, args.fnum_max),
        half_fov_range=(args.fov_min, args.fov_max),
        aspheric_allowed=args.aspheric,
        gamma=args.gamma,
        coc_mm=args.delta * 1e-3,
    )
    paths = lenslib.build_lens_source(
        spec, args.count, args.out_dir, seed=seed,
        population=args.population, generations=args.generations,
    )
    print(f"wrote {len(paths)} lens files to {args.out_dir}")
    _write_summary(os.path.join(args.out_dir, "run_summary.json"), "gen-source", args, paths)
    return 0


def cmd_sample(args):
    seed = _effective_seed(args)
    print(f"seed: {seed}")
    lens_files = sorted(glob.glob(os.path.join(args.source_dir, "lens_*.json")))
    lens_files = [p for p in lens_files if not p.endswith(".report.json")]
    source = []
    for lens_path in lens_files:
        report_path = os.path.splitext(lens_path)[0] + ".report.json"
        if os.path.exists(report_path):
            source.append((lens_path, quantify.OIQReport.load(report_path)))
    if not source:
        raise lenslib.LensLibError(f"no (lens, report) pairs found in {args.source_dir}")
    train, test = lenslib.hybrid_sample(
        source, args.m1, args.m2, seed=seed, name=args.name,
        require_all=not args.allow_partial,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    train_path = os.path.join(args.out_dir, f"{args.name}_train.json")
    test_path = os.path.join(args.out_dir, f"{args.name}_test.json")
    train.save(train_path)
    test.save(test_path)
    print(f"train: {len(train.entries)} entries  test: {len(test.entries)} entries")
    _write_summary(os.path.join(args.out_dir, "run_summary.json"), "sample", args,
                   [train_path, test_path])
    return 0


def cmd_psfmap(args):
    grid = raytrace.load_psf_grid(args.psf)
    psfs = raytrace.stack_rgb(grid)
    pmap = psf_repr.build_psf_map(psfs, args.height, args.width, args.np)
    psf_repr.save_psf_map(pmap, args.out)
    print(f"psf map {pmap.height}x{pmap.width}x{pmap.feature_length} written to {args.out}")
    _write_summary(_summary_path(args.out), "psfmap", args, [args.out])
    return 0


def cmd_quantize(args):
    codebook = psf_repr.load_codebook(args.codebook)
    feats = np.load(args.features)
    idx, quantized = psf_repr.quantize(feats, codebook)
    np.savez(args.out, indices=idx, quantized=quantized)
    print(f"quantized {len(idx)} vectors; {len(np.unique(idx))} codes used")
    _write_summary(_summary_path(args.out), "quantize", args, [args.out])
    return 0


def cmd_fit_codebook(args):
    seed = _effective_seed(args)
    print(f"seed: {seed}")
    feats = np.load(args.features)
    cb = psf_repr.fit_codebook(feats, args.k, args.iterations, seed=seed)
    psf_repr.save_codebook(cb, args.out)
    obj = psf_repr.kmeans_objective(feats, cb)
    print(f"codebook K={cb.k} d={cb.dim} objective {obj:.6g} written to {args.out}")
    _write_summary(_summary_path(args.out), "fit-codebook", args, [args.out])
    return 0


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outputs = []
    os.makedirs(args.out_dir, exist_ok=True)
    if args.report:
        fig, ax = plt.subplots()
        for path in args.report:
            report = quantify.OIQReport.load(path)
            ax.plot(range(1, 6), report.per_fov_oiq, marker="o",
                    label=os.path.basename(path))
        ax.set_xlabel("FoV index (center to periphery)")
        ax.set_ylabel("OIQ")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=7)
        out = os.path.join(args.out_dir, "oiq_vs_fov.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)
    if args.manifest:
        manifest = lenslib.LensLibManifest.load(args.manifest)
        keys = list(lenslib.ALL_SUBCLASS_KEYS)
        counts = [sum(1 for e in manifest.entries if e["subclass"] == k) for k in keys]
        fig, ax = plt.subplots(figsize=(10, 4))
        ax.bar(range(len(keys)), counts)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=60, fontsize=7)
        ax.set_ylabel("lenses")
        ax.set_title(f"{manifest.name} {manifest.split}: degradation subclass histogram")
        fig.tight_layout()
        out = os.path.join(args.out_dir, "subclass_histogram.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)
    if not outputs:
        raise quantify.QuantifyError("plot needs --report and/or --manifest")
    print("wrote " + ", ".join(outputs))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aberforge",
                                     description="Optical degradation toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: ABERFORGE_SEED or 0)")

    p = sub.add_parser("trace", help="trace a field bundle and dump spot points")
    p.add_argument("--lens", required=True)
    p.add_argument("--field", type=float, default=0.0)
    p.add_argument("--wavelength", type=float, default=587.56)
    p.add_argument("--rays", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("psf", help="compute the FoV x wavelength PSF grid")
    p.add_argument("--lens", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-fov", type=int, default=64)
    p.add_argument("--n-wave", type=int, default=31)
    p.add_argument("--rays", type=int, default=10_000)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("simulate", help="render a degraded image from a PSF grid")
    p.add_argument("--image", required=True)
    p.add_argument("--psf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--read-sigma", type=float, default=0.0)
    p.add_argument("--shot-scale", type=float, default=0.0)
    add_seed(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("quantify", help="produce an OIQ report for a lens")
    p.add_argument("--lens", required=True)
    p.add_argument("--psf", default=None, help="precomputed PSF grid (else traced)")
    p.add_argument("--out", default=None)
    p.add_argument("--alpha", type=float, default=quantify.DEFAULT_ALPHA)
    p.add_argument("--np", type=int, default=quantify.DEFAULT_NP)
    p.add_argument("--n-fov", type=int, default=64)
    p.add_argument("--n-wave", type=int, default=31)
    p.add_argument("--rays", type=int, default=10_000)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("classify", help="OD-Class from 5 OIQ values or a report")
    p.add_argument("--report", default=None)
    p.add_argument("--oiq", type=float, nargs="*", default=[])
    p.add_argument("--alpha", type=float, default=quantify.DEFAULT_ALPHA)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("gen-source", help="generate a lens source via EAOD-lite")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--min-elements", type=int, default=1)
    p.add_argument("--max-elements", type=int, default=2)
    p.add_argument("--f-min", type=float, default=45.0)
    p.add_argument("--f-max", type=float, default=55.0)
    p.add_argument("--fnum-min", type=float, default=2.8)
    p.add_argument("--fnum-max", type=float, default=5.6)
    p.add_argument("--fov-min", type=float, default=3.0)
    p.add_argument("--fov-max", type=float, default=15.0)
    p.add_argument("--aspheric", action="store_true")
    p.add_argument("--gamma", type=float, default=lenslib.DEFAULT_GAMMA)
    p.add_argument("--delta", type=float, default=24.0, help="circle of confusion (um)")
    p.add_argument("--population", type=int, default=24)
    p.add_argument("--generations", type=int, default=30)
    add_seed(p)
    p.set_defaults(func=cmd_gen_source)

    p = sub.add_parser("sample", help="hybrid-sample train/test manifests")
    p.add_argument("--source-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--m1", type=int, required=True)
    p.add_argument("--m2", type=int, required=True)
    p.add_argument("--name", default="lenslib")
    p.add_argument("--allow-partial", action="store_true",
                   help="sample only subclasses holding at least m1+m2 lenses")
    add_seed(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("psfmap", help="build a per-pixel PSF feature map")
    p.add_argument("--psf", required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--np", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_psfmap)

    p = sub.add_parser("quantize", help="nearest-neighbor quantize feature vectors")
    p.add_argument("--codebook", required=True)
    p.add_argument("--features", required=True, help=".npy feature array")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("fit-codebook", help="fit a VQ codebook with k-means")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=psf_repr.DEFAULT_K)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(func=cmd_fit_codebook)

    p = sub.add_parser("plot", help="OIQ-vs-FoV curves and subclass histograms")
    p.add_argument("--report", nargs="*", default=[])
    p.add_argument("--manifest", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
