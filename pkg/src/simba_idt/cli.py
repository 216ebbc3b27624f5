"""Command-line surface: simulate, reconstruct, theory, probe, compare, plot.

Exit codes: 0 success, 2 usage error, 3 data error (bad files, bad
dimensions, invalid parameters), 4 non-convergence.  A plain key=value
config file can mirror any flag of the chosen subcommand; explicit
command-line flags win over config entries.  The environment variable
SIMBA_IDT_THREADS caps the numeric thread pools for reproducible traces.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from simba_idt import containers
from simba_idt.denoisers import DenoiserSpec, nonexpansiveness_probe
from simba_idt.errors import DataError, NonConvergenceError
from simba_idt.fidelity import FidelityProblem, make_rng
from simba_idt.forward import synth_tf, tikhonov_reconstruct
from simba_idt.simulate import (
    make_phantom,
    mean_align,
    simulate_measurements,
    snr,
    snr_fixed,
    snr_volumes,
)
from simba_idt.solvers import (
    SolverConfig,
    accelerated_run,
    gm_red_run,
    simba_run,
)
from simba_idt import theory as theory_mod

# flags that take no value, per subcommand, for config-file expansion
_BOOL_FLAGS = {"accelerated", "full-batch-stub", "without-replacement", "joint"}


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def gamma_value(text: str):
    if text == "auto":
        return "auto"
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"step size must be positive, got {value}")
    return value


def snr_value(text: str) -> float:
    return float("inf") if text.lower() in ("inf", "infinite", "none") else float(text)


def parse_denoiser(text: str) -> DenoiserSpec:
    """'identity', 'gaussian[:k=v,...]', 'tv[:k=v,...]', or 'cnn:weights.dnw'."""
    head, _, rest = text.partition(":")
    kinds = {"identity": "identity", "gaussian": "gaussianKernel",
             "gaussianKernel": "gaussianKernel", "tv": "totalVariation",
             "totalVariation": "totalVariation", "cnn": "cnn"}
    if head not in kinds:
        raise DataError(f"unknown denoiser {head!r}; expected one of "
                        "identity, gaussian, tv, cnn:PATH")
    kind = kinds[head]
    if kind == "cnn":
        if not rest:
            raise DataError("cnn denoiser needs a weight file: cnn:weights.dnw")
        weights = containers.read_cnn_weights(rest)
        sigma = weights.metadata.get("sigma") or 0.0
        return DenoiserSpec(kind="cnn", sigma=float(sigma), weights=weights,
                            weight_file=rest)
    params = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not val:
                raise DataError(f"malformed denoiser parameter {item!r}")
            params[key.strip()] = val.strip()
    if kind == "identity":
        return DenoiserSpec(kind="identity")
    if kind == "gaussianKernel":
        return DenoiserSpec(
            kind="gaussianKernel",
            kernel_radius=int(params.pop("radius", 2)),
            kernel_sigma=float(params.pop("sigma", 1.0)),
            **_no_leftovers(params, "gaussian"))
    return DenoiserSpec(
        kind="totalVariation",
        tv_weight=float(params.pop("weight", 0.05)),
        tv_max_iter=int(params.pop("iters", 200)),
        tv_tol=float(params.pop("tol", 1e-7)),
        **_no_leftovers(params, "tv"))


def _no_leftovers(params: dict, kind: str) -> dict:
    if params:
        raise DataError(f"unknown {kind} denoiser parameters: {sorted(params)}")
    return {}


def spread_angles(n_ill: int, polar_max: float = 0.35) -> list:
    """Deterministic illumination layout: up to 12 angles per ring."""
    rings = max(1, -(-n_ill // 12))
    per = [n_ill // rings + (1 if i < n_ill % rings else 0) for i in range(rings)]
    angles = []
    for ring, count in enumerate(per):
        polar = polar_max * (ring + 1) / rings
        offset = 0.5 * ring  # stagger rings so angles never coincide
        for i in range(count):
            az = 2.0 * np.pi * i / count + offset
            angles.append((polar * np.cos(az), polar * np.sin(az)))
    return angles


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    angles = spread_angles(args.illuminations, args.polar_max)
    tf = synth_tf(args.size, args.size, args.slices,
                  wavelength_um=args.wavelength_um, na=args.na,
                  illumination_angles=angles,
                  slice_spacing_um=args.slice_spacing_um,
                  background_index=args.background_index,
                  seed=args.seed,
                  pixel_size_um=args.pixel_size_um,
                  base_defocus_um=args.base_defocus_um,
                  magnification=args.magnification,
                  z_led_mm=args.z_led_mm)
    if args.phantom.startswith("grayscale:"):
        phantom = make_phantom(args.size, args.size, args.slices, "grayscaleImage",
                               args.seed, max_contrast=args.max_contrast,
                               image_path=args.phantom.split(":", 1)[1])
    elif args.phantom == "disks":
        phantom = make_phantom(args.size, args.size, args.slices, "disks",
                               args.seed, max_contrast=args.max_contrast)
    else:
        raise DataError(f"unknown phantom {args.phantom!r}; "
                        "expected disks or grayscale:IMAGE")
    extra = dict(tf.metadata)
    extra.update({
        "axial_position_of_sample_um": args.sample_z_um,
        "convention": tf.convention,
        "phantom": args.phantom,
        "max_contrast": args.max_contrast,
    })
    m = simulate_measurements(phantom, tf, args.input_snr_db, args.seed,
                              metadata=extra)
    containers.write_measurements(args.out_measurements, m)
    containers.write_tf(args.out_tf, tf)
    print(f"wrote {m.illuminations} measurements of {args.size}x{args.size} "
          f"({args.slices} slice{'s' if args.slices != 1 else ''}) "
          f"to {args.out_measurements}; transfer functions to {args.out_tf}")
    return 0


def _load_problem(args) -> FidelityProblem:
    m = containers.read_measurements(args.measurements)
    tf = containers.read_tf(args.tf)
    return FidelityProblem(measurements=m, tf=tf)


def cmd_reconstruct(args) -> int:
    p = _load_problem(args)
    meta = {"algo": args.algo, "measurements": args.measurements, "tf": args.tf}

    if args.algo == "tikhonov":
        result = tikhonov_reconstruct(p.measurements, p.tf, args.reg_weight)
        meta.update({"method": result.method, "reg_weight": args.reg_weight,
                     "cg_iterations": result.iterations})
        volume = result.volume
        trace = None
    else:
        denoiser = parse_denoiser(args.denoiser)
        config = SolverConfig(
            denoiser=denoiser, tau=args.tau, gamma=args.gamma,
            batch_size=args.batch, max_iter=args.iters, seed=args.seed,
            gamma_schedule=args.gamma_schedule,
            with_replacement=not args.without_replacement,
            full_batch_stub=args.full_batch_stub)
        writer = containers.CsvTraceWriter(args.trace) if args.trace else None
        callback = writer.write_row if writer else None
        try:
            if args.algo == "gm-red":
                if args.accelerated:
                    volume, trace = accelerated_run(p, config, full_batch=True,
                                                    row_callback=callback)
                else:
                    volume, trace = gm_red_run(p, config, row_callback=callback)
            else:
                run = accelerated_run if args.accelerated else simba_run
                volume, trace = run(p, config, row_callback=callback)
        finally:
            if writer:
                writer.close()
        meta.update({"denoiser": denoiser.describe(), "tau": args.tau,
                     "gamma": trace.gamma, "batch_size": trace.batch_size,
                     "iters": len(trace), "seed": args.seed,
                     "accelerated": args.accelerated,
                     "stop_reason": trace.stop_reason})

    containers.write_volume(args.out, volume, meta)
    message = f"wrote reconstruction to {args.out} ({meta.get('method', args.algo)})"
    if p.measurements.ground_truth is not None:
        message += f"; SNR vs ground truth {snr_volumes(volume, p.measurements.ground_truth):.2f} dB"
    if trace is not None and trace.diverged:
        message += f" [{trace.stop_reason}]"
    print(message)
    return 0


def cmd_theory(args) -> int:
    instance = theory_mod.build_theory_instance(
        size=args.size, slices=args.slices, n_ill=args.illuminations,
        tau=args.tau, seed=args.seed, input_snr_db=args.input_snr_db)
    print(f"instance: L = {instance.lipschitz:.6g}, nu^2 = {instance.nu2:.6g}, "
          f"||x0 - x*||^2 = {instance.dist0_sq:.6g}")
    batches = tuple(int(b) for b in args.batches.split(","))
    ran_any = False
    if args.suite in ("theorem", "all"):
        report = theory_mod.run_theorem1_suite(
            instance, batch_sizes=batches, horizon=args.horizon,
            seeds=tuple(range(args.seeds)))
        print(report.summary())
        if args.out_report:
            report.to_csv(args.out_report)
            print(f"wrote per-iteration bound comparison to {args.out_report}")
        if args.out_summary:
            with open(args.out_summary, "w") as handle:
                handle.write(report.summary() + "\n")
        ran_any = True
    if args.suite in ("propositions", "all"):
        checks = theory_mod.proposition_suite(make_rng(args.seed),
                                              n_pairs=args.pairs)
        for check in checks.values():
            state = "pass" if check.passed else "FAIL"
            print(f"  {check.name}: {state} "
                  f"(max violation {check.max_violation:.3e}, {check.pairs} pairs)")
        ran_any = True
    if args.suite in ("corollary", "all"):
        sweep = theory_mod.run_corollary_sweep(
            instance, seeds=tuple(range(min(args.seeds, 10))))
        gaps = ", ".join(f"t={t}: {v:.4g}" for t, v in sorted(sweep.min_g_sq.items()))
        print(f"  horizon-scaled step size: best ||G||^2 {gaps}; "
              f"log-log slope {sweep.slope:.3f}")
        ran_any = True
    if not ran_any:
        raise DataError(f"unknown suite {args.suite!r}")
    return 0


def cmd_probe(args) -> int:
    d = parse_denoiser(args.denoiser)
    dims = (args.slices, args.size, args.size) if args.slices > 1 \
        else (args.size, args.size)
    result = nonexpansiveness_probe(d, dims, args.pairs, make_rng(args.seed))
    verdict = "certified nonexpansive" if d.certified_nonexpansive \
        else "no nonexpansiveness certificate"
    print(f"{d.describe()}: max ||D(x)-D(y)||/||x-y|| = {result.max_ratio:.9f} "
          f"over {args.pairs} pairs at {dims} ({verdict})")
    if d.certified_nonexpansive and result.max_ratio > 1.0 + 1e-9:
        print("warning: probe exceeds 1 + 1e-9 despite certificate")
    return 0


def cmd_compare(args) -> int:
    est, _ = containers.read_volume(args.estimate)
    ref, _ = containers.read_volume(args.reference)
    aligned_re = mean_align(est.re, ref.re)
    rows = [
        ("affine-fit SNR (phase)", f"{snr(est.re, ref.re):.4f} dB"),
        ("affine-fit SNR (joint re+im)", f"{snr(est.ravel(), ref.ravel()):.4f} dB"),
        ("fixed SNR (phase, mean aligned)", f"{snr_fixed(aligned_re, ref.re):.4f} dB"),
    ]
    width = max(len(name) for name, _ in rows)
    print(f"estimate:  {args.estimate}")
    print(f"reference: {args.reference}")
    for name, value in rows:
        print(f"  {name:<{width}}  {value}")
    return 0


def cmd_plot(args) -> int:
    data = containers.read_trace_csv(args.trace)
    snr_col = np.asarray(data.get("snr_db", []), dtype=np.float64)
    if snr_col.size == 0 or np.all(np.isnan(snr_col)):
        raise DataError(f"{args.trace}: no snr_db values to plot "
                        "(run reconstruct on measurements with ground truth)")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    iters = data["iter"]
    seconds = data["wall_seconds"]
    outputs = []
    for xlabel, xs, suffix in (("iteration", iters, "snr_vs_iter"),
                               ("seconds", seconds, "snr_vs_seconds")):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, snr_col)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("SNR (dB)")
        ax.grid(True, alpha=0.3)
        out = f"{args.out_prefix}_{suffix}.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)
    print("wrote " + " and ".join(outputs))
    return 0


# ---------------------------------------------------------------------------
# parser assembly and config-file expansion
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simba-idt",
        description="Online minibatch RED reconstruction for intensity "
                    "diffraction tomography")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="phantom + transfer functions + noisy measurements")
    sim.add_argument("--size", type=positive_int, default=64)
    sim.add_argument("--slices", type=positive_int, default=1)
    sim.add_argument("--illuminations", type=positive_int, default=60)
    sim.add_argument("--input-snr-db", type=snr_value, default=20.0,
                     help="per-illumination input SNR; 'inf' for noiseless")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--phantom", default="disks",
                     help="disks or grayscale:IMAGE_PATH")
    sim.add_argument("--max-contrast", type=float, default=0.1)
    sim.add_argument("--wavelength-um", type=float, default=0.63)
    sim.add_argument("--na", type=float, default=0.65)
    sim.add_argument("--background-index", type=float, default=1.33)
    sim.add_argument("--slice-spacing-um", type=float, default=5.0)
    sim.add_argument("--pixel-size-um", type=float, default=None)
    sim.add_argument("--base-defocus-um", type=float, default=None)
    sim.add_argument("--magnification", type=float, default=40.0)
    sim.add_argument("--z-led-mm", type=float, default=-70.0)
    sim.add_argument("--sample-z-um", type=float, default=0.0)
    sim.add_argument("--polar-max", type=float, default=0.35)
    sim.add_argument("--out-measurements", default="measurements.idtm")
    sim.add_argument("--out-tf", default="tf.idtf")
    sim.add_argument("--config", default=None)
    sim.set_defaults(func=cmd_simulate)

    rec = sub.add_parser("reconstruct", help="solve for the contrast volume")
    rec.add_argument("--algo", choices=("simba", "gm-red", "tikhonov"),
                     default="simba")
    rec.add_argument("--measurements", default="measurements.idtm")
    rec.add_argument("--tf", default="tf.idtf")
    rec.add_argument("--denoiser", default="gaussian")
    rec.add_argument("--tau", type=float, default=0.1)
    rec.add_argument("--gamma", type=gamma_value, default="auto")
    rec.add_argument("--gamma-schedule", choices=("constant", "invSqrtT"),
                     default="constant")
    rec.add_argument("--batch", type=positive_int, default=20)
    rec.add_argument("--iters", type=positive_int, default=60)
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--accelerated", action="store_true")
    rec.add_argument("--without-replacement", action="store_true")
    rec.add_argument("--full-batch-stub", action="store_true")
    rec.add_argument("--reg-weight", type=float, default=0.01,
                     help="Tikhonov ridge weight")
    rec.add_argument("--trace", default=None, help="stream trace CSV here")
    rec.add_argument("--out", default="reconstruction.idtm")
    rec.add_argument("--config", default=None)
    rec.set_defaults(func=cmd_reconstruct)

    theo = sub.add_parser("theory", help="convergence-laboratory suites")
    theo.add_argument("--suite", default="all",
                      choices=("theorem", "propositions", "corollary", "all"))
    theo.add_argument("--size", type=positive_int, default=16)
    theo.add_argument("--slices", type=positive_int, default=2)
    theo.add_argument("--illuminations", type=positive_int, default=6)
    theo.add_argument("--tau", type=float, default=0.2)
    theo.add_argument("--seed", type=int, default=3)
    theo.add_argument("--input-snr-db", type=snr_value, default=25.0)
    theo.add_argument("--seeds", type=positive_int, default=20)
    theo.add_argument("--horizon", type=positive_int, default=500)
    theo.add_argument("--batches", default="1,2,5")
    theo.add_argument("--pairs", type=positive_int, default=500)
    theo.add_argument("--out-report", default=None)
    theo.add_argument("--out-summary", default=None)
    theo.add_argument("--config", default=None)
    theo.set_defaults(func=cmd_theory)

    prb = sub.add_parser("probe", help="empirical nonexpansiveness probe")
    prb.add_argument("--denoiser", required=True)
    prb.add_argument("--size", type=positive_int, default=32)
    prb.add_argument("--slices", type=positive_int, default=1)
    prb.add_argument("--pairs", type=positive_int, default=1000)
    prb.add_argument("--seed", type=int, default=0)
    prb.add_argument("--config", default=None)
    prb.set_defaults(func=cmd_probe)

    cmp_ = sub.add_parser("compare", help="SNR between two stored volumes")
    cmp_.add_argument("--estimate", required=True)
    cmp_.add_argument("--reference", required=True)
    cmp_.add_argument("--config", default=None)
    cmp_.set_defaults(func=cmd_compare)

    plo = sub.add_parser("plot", help="trace CSV to SNR plot images")
    plo.add_argument("--trace", required=True)
    plo.add_argument("--out-prefix", default="trace")
    plo.add_argument("--config", default=None)
    plo.set_defaults(func=cmd_plot)
    return parser


def _expand_config(argv: list) -> list:
    """Insert config-file entries as flags right after the subcommand."""
    if "--config" not in argv:
        return argv
    path = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
            break
    if path is None:
        return argv
    try:
        with open(path) as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    flags = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip().replace("_", "-")
        value = value.strip()
        if key in _BOOL_FLAGS:
            if value.lower() in ("1", "true", "yes", "on"):
                flags.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise DataError(f"{path}:{lineno}: boolean flag {key} got {value!r}")
        else:
            flags.extend([f"--{key}", value])
    # subcommand is the first non-flag token
    for i, token in enumerate(argv):
        if not token.startswith("-"):
            return argv[:i + 1] + flags + argv[i + 1:]
    return argv + flags


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _expand_config(argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
