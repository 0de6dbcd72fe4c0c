#!/usr/bin/env python3
"""
myotrack - Groupwise cardiac motion tracking and strain from cine MRI

Usage:
    python main.py phantom --out DIR                       Generate an analytic test phantom
    python main.py register --in cine.cseq --out DIR       Register a cine sequence
    python main.py strain --disp traj.dsp1 --mask myo.msk1 --out strain.csv
    python main.py evaluate --est traj.dsp1 --truth truth.dsp1 --mask myo.msk1 --out report.csv
    python main.py track --contour endo.csv --disp traj.dsp1 --frame 12 --out tracked.csv
    python main.py costmap --in cine.cseq --disp disp.dsp1 --out costmap.smp1

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from loguru import logger

from config.settings import (
    COARSEST_PATCH_SIZE,
    COARSEST_PATCH_SPACING,
    LOG_FILE,
    LOG_FORMAT,
    LOG_LEVEL,
    METRICS,
    PHANTOM_AMPLITUDE,
    PHANTOM_FRAMES,
    PHANTOM_INNER_RADIUS,
    PHANTOM_MODE,
    PHANTOM_NOISE,
    PHANTOM_OUTER_RADIUS,
    PHANTOM_PIXEL_SPACING,
    PHANTOM_SIZE,
    PHANTOM_TAPER,
    PRESETS,
    PYRAMID_FACTOR,
    PYRAMID_LEVELS,
    SEGMENT_CHOICES,
    DEFAULT_SEED,
)
from core.utils import log_duration

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Remove the default handler and log to stderr and a rotating file."""
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    logger.add(LOG_FILE, level=level, format=LOG_FORMAT, rotation="10 MB")


def _banner(title: str) -> None:
    print("\n" + "=" * 50)
    print(title)
    print("=" * 50)


def _load_trajectory(path, grid=None, frames=None):
    """
    Read a DSP1 field as a trajectory.

    Groupwise displacement files (nonzero first frame) are composed to frame 1
    on the fly, so either file written by `register` can be passed.
    """
    from core.deform import TrajectoryField, compose_to_first_frame
    from core.formats import read_dsp1

    values = read_dsp1(path, grid=grid, frames=frames)
    if np.any(values[0] != 0.0):
        logger.info(f"{path} holds a groupwise displacement; composing trajectories to frame 1")
        return compose_to_first_frame(values)
    return TrajectoryField(values)


def _parse_vector(text: str):
    try:
        ux, uy = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'ux,uy', got '{text}'") from None
    return ux, uy


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    """Generate a phantom with its ground truth."""
    from core.evaluation import Contour, end_systolic_frame
    from core.formats import write_contours, write_cseq, write_dsp1, write_msk1, write_strain_csv
    from core.phantom import PhantomSpec, generate_phantom

    # Radii default to the 64-pixel geometry scaled to the requested grid.
    scale = args.size / PHANTOM_SIZE
    spec = PhantomSpec(
        width=args.size,
        height=args.size,
        frames=args.frames,
        inner_radius=args.inner_radius or PHANTOM_INNER_RADIUS * scale,
        outer_radius=args.outer_radius or PHANTOM_OUTER_RADIUS * scale,
        taper=args.taper or PHANTOM_TAPER * scale,
        amplitude=args.amplitude,
        mode=args.mode,
        noise=args.noise,
        pixel_spacing=args.spacing,
        seed=args.seed,
    )
    seq, motion = generate_phantom(spec)
    out = Path(args.out)
    truth = motion.global_truth()
    es = end_systolic_frame(truth["GCS"])

    write_cseq(out / "cine.cseq", seq)
    write_dsp1(out / "truth.dsp1", motion.trajectory.values)
    write_msk1(out / "myo.msk1", motion.mask.mask)
    write_strain_csv(out / "truth_strain.csv", truth)
    for which in ("endo", "epi"):
        write_contours(out / f"{which}.csv", [Contour(motion.boundary(which, 1), frame=1)])
        write_contours(out / f"{which}_es.csv", [Contour(motion.boundary(which, es), frame=es)])

    _banner("PHANTOM")
    print(f"Grid:        {spec.width}x{spec.height}, {spec.frames} frames, {spec.pixel_spacing} mm/px")
    print(f"Motion:      {spec.mode}, amplitude {spec.amplitude}")
    print(f"End-systole: frame {es}  GRS {100 * truth['GRS'][es - 1]:+.2f}%  GCS {100 * truth['GCS'][es - 1]:+.2f}%")
    print(f"Output:      {out}")


@log_duration("register")
def cmd_register(args):
    """Register a cine sequence groupwise (or with the pairwise baseline)."""
    from core.deform import compose_to_first_frame
    from core.formats import read_cseq, write_dsp1, write_trace_csv
    from core.imaging import CineSequence, normalize_intensities
    from core.optimizer import register_groupwise, register_pairwise
    from core.run_config import ConfigError, load_run_config, resolve_run_config
    from core.utils import atomic_write

    file_values = load_run_config(args.config) if args.config else None
    config = resolve_run_config(args, file_values)
    if not config.input or not config.output:
        raise ConfigError("register needs an input sequence (--in) and an output directory (--out)")

    seq = read_cseq(config.input)
    if config.pixel_spacing is not None:
        seq = CineSequence(seq.data, pixel_spacing=config.pixel_spacing)
    if config.normalize:
        seq = normalize_intensities(seq)
    solver = config.solver_config()
    logger.info(
        f"Registering {config.input} ({seq.width}x{seq.height}x{seq.frames}) with {config.metric}, "
        f"preset {config.preset}"
    )

    out = Path(config.output)
    if config.metric == "pairwise":
        steps, trajectory, trace = register_pairwise(seq, solver)
        for t, step in enumerate(steps, start=2):
            write_dsp1(out / f"step_{t:03d}.dsp1", step[None])
    else:
        disp, _, trace = register_groupwise(seq, solver, metric=config.metric)
        write_dsp1(out / "disp.dsp1", disp)
        trajectory = compose_to_first_frame(disp)
    write_dsp1(out / "traj.dsp1", trajectory.values)
    write_trace_csv(out / "trace.csv", trace)
    atomic_write(out / "config.json", json.dumps(config.to_dict(), indent=2) + "\n")

    _banner(f"REGISTRATION ({config.metric})")
    for key, reason in trace.terminations.items():
        print(f"  level {key}: {reason}")
    if not trajectory.converged:
        print(f"  frame-1 inversion residual {trajectory.residual:.3f} px (not converged)")
    print(f"Output: {out}")


def cmd_strain(args):
    """Strain curves from a trajectory field and a myocardial mask."""
    from core.formats import read_cseq, read_msk1, write_smp1, write_strain_csv
    from core.run_config import ConfigError, load_run_config, resolve_run_config
    from core.strain import MyoMask, compute_strain

    file_values = load_run_config(args.config) if args.config else {}
    config = resolve_run_config(args, file_values)
    if not config.mask:
        raise ConfigError("strain needs a myocardial mask (--mask, or 'mask' in --config)")
    grid = frames = None
    if args.input:
        seq = read_cseq(args.input)
        grid, frames = seq.grid, seq.frames
    traj = _load_trajectory(args.disp, grid=grid, frames=frames)
    myo = MyoMask(read_msk1(config.mask, grid=traj.grid), reference_angle=config.reference_angle)

    segmented = args.segments is not None or "segments" in file_values
    result = compute_strain(
        traj,
        myo,
        n_segments=config.segments if segmented else None,
        long_axis=args.long_axis,
    )
    write_strain_csv(args.out, result.global_values)
    if args.maps:
        write_smp1(args.maps, [result.maps[name] for name in sorted(result.maps)])
        logger.info(f"Strain maps ({', '.join(sorted(result.maps))}) written to {args.maps}")

    curves = result.global_values
    _banner("STRAIN")
    for name in ("GRS", "GCS", "GLS"):
        if name in curves:
            peak = int(np.argmax(np.abs(curves[name])))
            print(f"  {name}: peak {100 * curves[name][peak]:+.2f}% at frame {peak + 1}, "
                  f"last frame {100 * curves[name][-1]:+.2f}%")
    print(f"Output: {args.out}")


def cmd_evaluate(args):
    """Compare an estimate with the truth and write a metric report."""
    from core.evaluation import (
        MetricReport,
        contour_distance,
        drift,
        end_systolic_frame,
        epe,
        gse,
        vse,
    )
    from core.formats import read_contours, read_cseq, read_msk1, read_strain_csv, write_report_csv
    from core.run_config import ConfigError, load_run_config, resolve_run_config
    from core.strain import MyoMask, compute_strain

    file_values = load_run_config(args.config) if args.config else None
    config = resolve_run_config(args, file_values)
    if not config.mask:
        raise ConfigError("evaluate needs a myocardial mask (--mask, or 'mask' in --config)")

    spacing = args.spacing
    grid = frames = None
    if args.input:
        seq = read_cseq(args.input)
        grid, frames = seq.grid, seq.frames
        spacing = spacing if spacing is not None else seq.pixel_spacing
    spacing = spacing if spacing is not None else 1.0

    est = _load_trajectory(args.est, grid=grid, frames=frames)
    truth = _load_trajectory(args.truth, grid=est.grid, frames=est.frames)
    myo = MyoMask(read_msk1(config.mask, grid=est.grid))

    est_strain = compute_strain(est, myo)
    truth_strain = compute_strain(truth, myo)
    est_curves = dict(est_strain.global_values)
    truth_curves = dict(truth_strain.global_values)
    if args.est_strain:
        est_curves = {k: v / 100.0 for k, v in read_strain_csv(args.est_strain, frames=est.frames).items()}
    if args.truth_strain:
        truth_curves = {k: v / 100.0 for k, v in read_strain_csv(args.truth_strain, frames=est.frames).items()}

    es = end_systolic_frame(truth_curves["GCS"])
    report = MetricReport(
        pixel_spacing=spacing,
        end_systolic_frame=es,
        epe_es_px=epe(est, truth, myo.mask, frame=es),
        epe_all_px=epe(est, truth, myo.mask),
    )
    for direction, name in (("radial", "GRS"), ("circumferential", "GCS")):
        report.vse_es[name] = vse(est_strain.maps[direction], truth_strain.maps[direction], myo.mask, es)
        report.gse_es[name] = gse(est_curves[name], truth_curves[name], es)
        report.drift[name] = drift(est_curves[name])
    for name, tracked_path, reference_path in config.contours:
        tracked = read_contours(tracked_path)[0]
        reference = read_contours(reference_path)[0]
        report.contour_distances[name] = contour_distance(tracked, reference, spacing)

    write_report_csv(args.out, report.rows())
    _banner("EVALUATION")
    for metric, value in report.rows():
        print(f"  {metric:<20} {value:10.4f}")
    print(f"Output: {args.out}")


def cmd_track(args):
    """Carry a frame-1 contour to another frame."""
    from core.formats import read_contours, write_contours
    from core.evaluation import track_contour

    contours = read_contours(args.contour)
    traj = _load_trajectory(args.disp)
    tracked = [track_contour(c, traj, args.frame) for c in contours]
    write_contours(args.out, tracked)
    logger.info(f"Tracked {len(tracked)} contour(s) to frame {args.frame}: {args.out}")


def cmd_costmap(args):
    """Local rank map of a sequence before and after registration."""
    from core.cost import layout_for_grid, local_rank_map, relative_reduction
    from core.formats import read_cseq, read_dsp1, write_smp1
    from core.imaging import normalize_intensities, warp_sequence

    seq = normalize_intensities(read_cseq(args.input))
    layout = layout_for_grid(seq.grid, args.patch_size, args.patch_spacing)
    before = local_rank_map(seq, layout, args.workers)
    channels = [before[None]]
    if args.disp:
        disp = read_dsp1(args.disp, grid=seq.grid, frames=seq.frames)
        after = local_rank_map(warp_sequence(seq, disp), layout, args.workers)
        reduction = relative_reduction(before, after)
        channels += [after[None], reduction[None]]
        logger.info(f"Mean local rank reduction: {100 * reduction.mean():.1f}%")
    write_smp1(args.out, channels)
    logger.info(f"Cost map ({len(channels)} channel(s)) written to {args.out}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code of this tool."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_solver_flags(parser):
    """Overridable flags; None means 'not given' so config files and presets apply."""
    parser.add_argument('--config', help='JSON file of run settings')
    parser.add_argument('--preset', choices=sorted(PRESETS), help='Hyperparameter preset (default: simulated)')
    parser.add_argument('--levels', type=int, help=f'Pyramid levels (default: {PYRAMID_LEVELS})')
    parser.add_argument('--patch-size', type=int, help=f'Coarsest-level patch size (default: {COARSEST_PATCH_SIZE})')
    parser.add_argument('--patch-spacing', type=int, help=f'Coarsest-level patch spacing (default: {COARSEST_PATCH_SPACING})')
    parser.add_argument('--control-spacing', type=int, help='Control point spacing in pixels')
    parser.add_argument('--spatial-weight', type=float, help='Bending energy weight')
    parser.add_argument('--temporal-weight', type=float, help='Temporal smoothness weight')
    parser.add_argument('--tolerance', type=float, help='Relative cost change that stops a level')
    parser.add_argument('--max-iterations', type=int, help='Iteration cap per level')
    parser.add_argument('--workers', type=int, help='Threads for patchwise SVDs')
    parser.add_argument('--seed', type=int, help='Seed, written to config.json with the other run settings')
    parser.add_argument('--deterministic', action='store_true', default=None, help='Single-threaded, reproducible run')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        description="myotrack - Groupwise cardiac motion tracking and strain",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py phantom --out runs/phantom
  python main.py register --in runs/phantom/cine.cseq --metric llr --out runs/llr
  python main.py strain --disp runs/llr/traj.dsp1 --mask runs/phantom/myo.msk1 --out runs/llr/strain.csv
  python main.py evaluate --est runs/llr/traj.dsp1 --truth runs/phantom/truth.dsp1 \\
      --mask runs/phantom/myo.msk1 --out runs/llr/report.csv
        """
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    subparsers = parser.add_subparsers(dest='command', help='Commands', parser_class=_Parser)

    # Phantom command
    ph_parser = subparsers.add_parser('phantom', help='Generate an analytic phantom and its ground truth')
    ph_parser.add_argument('--out', required=True, help='Output directory')
    ph_parser.add_argument('--mode', choices=['scale', 'incompressible'], default=PHANTOM_MODE)
    ph_parser.add_argument('--size', type=int, default=PHANTOM_SIZE, help='Grid size in pixels')
    ph_parser.add_argument('--frames', type=int, default=PHANTOM_FRAMES)
    ph_parser.add_argument('--inner-radius', type=float, help='Endocardial radius in px (default: scaled to --size)')
    ph_parser.add_argument('--outer-radius', type=float, help='Epicardial radius in px (default: scaled to --size)')
    ph_parser.add_argument('--taper', type=float, help='Width of the motion fade-out beyond the wall, px')
    ph_parser.add_argument('--amplitude', type=float, default=PHANTOM_AMPLITUDE, help='Contraction amplitude A')
    ph_parser.add_argument('--noise', type=float, default=PHANTOM_NOISE, help='Noise sigma, fraction of range')
    ph_parser.add_argument('--spacing', type=float, default=PHANTOM_PIXEL_SPACING, help='Pixel spacing in mm')
    ph_parser.add_argument('--seed', type=int, default=DEFAULT_SEED)

    # Register command
    reg_parser = subparsers.add_parser('register', help='Register a cine sequence')
    reg_parser.add_argument('--in', dest='input', help='Input CSEQ sequence')
    reg_parser.add_argument('--out', dest='output', help='Output directory')
    reg_parser.add_argument('--metric', choices=METRICS, help='Dissimilarity (default: llr)')
    reg_parser.add_argument('--spacing', dest='pixel_spacing', type=float, help='Override pixel spacing (mm)')
    reg_parser.add_argument('--normalize', action=argparse.BooleanOptionalAction, default=None,
                            help='Min-max normalize intensities on load (default: on)')
    _add_solver_flags(reg_parser)

    # Strain command
    st_parser = subparsers.add_parser('strain', help='Strain curves from a trajectory field')
    st_parser.add_argument('--in', dest='input', help='Companion CSEQ, for grid checks')
    st_parser.add_argument('--disp', required=True, help='Trajectory (or groupwise displacement) DSP1')
    st_parser.add_argument('--mask', help='Myocardial MSK1 mask (or "mask" in --config)')
    st_parser.add_argument('--out', required=True, help='Strain CSV')
    st_parser.add_argument('--segments', type=int, choices=SEGMENT_CHOICES, help='Segmental strain sectors')
    st_parser.add_argument('--ref-angle', dest='reference_angle', type=float, help='Sector reference angle (radians)')
    st_parser.add_argument('--long-axis', type=_parse_vector, help="Direction 'ux,uy' for a GLS column")
    st_parser.add_argument('--maps', help='Also write radial/circumferential strain maps (SMP1)')
    st_parser.add_argument('--config', help='JSON file of run settings')

    # Evaluate command
    ev_parser = subparsers.add_parser('evaluate', help='Score an estimate against ground truth')
    ev_parser.add_argument('--est', required=True, help='Estimated trajectory DSP1')
    ev_parser.add_argument('--truth', required=True, help='Ground-truth trajectory DSP1')
    ev_parser.add_argument('--mask', help='Myocardial MSK1 mask (or "mask" in --config)')
    ev_parser.add_argument('--in', dest='input', help='Companion CSEQ, for grid checks and pixel spacing')
    ev_parser.add_argument('--spacing', type=float, help='Pixel spacing in mm (default: from --in, else 1)')
    ev_parser.add_argument('--est-strain', help='Estimated strain CSV')
    ev_parser.add_argument('--truth-strain', help='Ground-truth strain CSV')
    ev_parser.add_argument('--contour', nargs=3, action='append', dest='contours',
                           metavar=('NAME', 'TRACKED', 'REFERENCE'),
                           help='Contour pair to compare (repeatable)')
    ev_parser.add_argument('--config', help='JSON file of run settings (mask, contours)')
    ev_parser.add_argument('--out', required=True, help='Metric report CSV')

    # Track command
    tr_parser = subparsers.add_parser('track', help='Track a frame-1 contour to another frame')
    tr_parser.add_argument('--contour', required=True, help='Contour CSV (frame,x,y)')
    tr_parser.add_argument('--disp', required=True, help='Trajectory DSP1')
    tr_parser.add_argument('--frame', type=int, required=True, help='Target frame (1-based)')
    tr_parser.add_argument('--out', required=True, help='Tracked contour CSV')

    # Costmap command
    finest = PYRAMID_FACTOR ** (PYRAMID_LEVELS - 1)
    cm_parser = subparsers.add_parser('costmap', help='Local rank map before/after registration')
    cm_parser.add_argument('--in', dest='input', required=True, help='Input CSEQ sequence')
    cm_parser.add_argument('--disp', help='Groupwise displacement DSP1 (adds after and reduction channels)')
    cm_parser.add_argument('--patch-size', type=int, default=COARSEST_PATCH_SIZE * finest)
    cm_parser.add_argument('--patch-spacing', type=int, default=COARSEST_PATCH_SPACING * finest)
    cm_parser.add_argument('--workers', type=int, default=1)
    cm_parser.add_argument('--out', required=True, help='Output SMP1 raster')

    return parser


COMMANDS = {
    'phantom': cmd_phantom,
    'register': cmd_register,
    'strain': cmd_strain,
    'evaluate': cmd_evaluate,
    'track': cmd_track,
    'costmap': cmd_costmap,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits 0, usage errors exit EXIT_USAGE
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    configure_logging("DEBUG" if args.verbose else LOG_LEVEL)

    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    from core.run_config import ConfigError

    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except ArithmeticError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
