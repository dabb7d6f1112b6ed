'''
Command line driver.

    segment        fuse the masks of a scene into consistent object classes
    eval           score one or more segmentation outputs against ground truth
    synth          write a synthetic scene with exact ground truth
    export-object  write the point cloud of the object a 2D mask belongs to
'''

import argparse
import json
import os
import sys
import time

from evaluation.metrics import combine_reports, evaluate
from misc.errors import InvariantViolation, SegFuseError, UsageError
from misc.log_utils import log_info, set_verbose
from misc.parse_config import apply_overrides, extract_config_info
from scene.formats import load_scene, write_cloud_ply
from scene.scene_model import first_views
from synth.generate_scene import SynthSpec, build_synth_scene, write_synth_scene
from transform.export_result import read_result, write_result
from transform.pipeline import extract_object, run


class CliParser(argparse.ArgumentParser):

    # Usage errors are input errors and share their exit code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def add_config_flags(parser: argparse.ArgumentParser) -> None:

    # Flag names mirror the configuration keys; unset flags keep the configured value
    parser.add_argument('--config', help='.cfg file or config_echo.json of an earlier run')
    parser.add_argument('--tau3d', type=float)
    parser.add_argument('--tau2d-percentile', type=float)
    parser.add_argument('--tau2d-override', type=float)
    parser.add_argument('--min-match-confidence', type=float)
    parser.add_argument('--max-matches-per-pair', type=int)
    parser.add_argument('--min-point-confidence', type=float)
    parser.add_argument('--max-cloud-points', type=int)
    parser.add_argument('--reach-radius', type=float)
    parser.add_argument('--sparse-view-max-images', type=int)
    parser.add_argument('--max-angle-deg', type=float)
    parser.add_argument('--max-translation-m', type=float)
    parser.add_argument('--k-nearest', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--threads', type=int, help='worker threads, 0 = one per CPU')
    parser.add_argument('--no-3d', action='store_true', help='skip the structural 3D stage')


def build_parser() -> CliParser:

    parser = CliParser(prog='segfuse', description='Multi-view 2D mask fusion')
    parser.add_argument('--quiet', action='store_true', help='only print warnings and errors')
    commands = parser.add_subparsers(dest='command', required=True)

    segment = commands.add_parser('segment', help='segment a scene')
    segment.add_argument('--scene', required=True, help='scene manifest JSON')
    segment.add_argument('--out', required=True, help='output directory')
    segment.add_argument('--views', type=int, help='keep only the first N views')
    segment.add_argument('--debug', action='store_true', help='also write partition_debug.json')
    add_config_flags(segment)

    evaluate_cmd = commands.add_parser('eval', help='score segmentation outputs')
    evaluate_cmd.add_argument('--result', required=True, action='append', help='segment output directory')
    evaluate_cmd.add_argument('--scene', required=True, action='append', help='manifest with ground truth')
    evaluate_cmd.add_argument('--out', help='directory for metrics.json and metrics_per_object.csv')

    synth = commands.add_parser('synth', help='write a synthetic scene')
    synth.add_argument('--out', required=True, help='scene directory')
    synth.add_argument('--objects', type=int, default=5)
    synth.add_argument('--views', type=int, default=6)
    synth.add_argument('--width', type=int, default=640)
    synth.add_argument('--height', type=int, default=480)
    synth.add_argument('--overseg', type=int, default=1, help='maximum fragments per mask')
    synth.add_argument('--dropout', type=float, default=0.0)
    synth.add_argument('--spurious', type=float, default=0.0)
    synth.add_argument('--noise', type=float, default=0.0, help='pointmap noise sigma, meters')
    synth.add_argument('--stride', type=int, default=2, help='match grid step, pixels')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--threads', type=int, default=1)

    export = commands.add_parser('export-object', help='export one object cloud')
    export.add_argument('--result', required=True, help='segment output directory')
    export.add_argument('--image', type=int, required=True)
    export.add_argument('--mask', type=int, required=True, help='local mask id in that image')
    export.add_argument('--out', required=True, help='PLY file to write')

    return parser


def cmd_segment(args: argparse.Namespace) -> int:
    '''
    Run the pipeline on a scene manifest and write the output directory.\n

    Parameters:
        `args (argparse.Namespace)` - Parsed `segment` arguments.\n

    Return:
        `exit_code (int)` - 0 on success.\n
    '''

    started = time.perf_counter()

    config = extract_config_info(args.config)
    config = apply_overrides(config,
                             tau3d=args.tau3d,
                             tau2d_percentile=args.tau2d_percentile,
                             tau2d_override=args.tau2d_override,
                             min_match_confidence=args.min_match_confidence,
                             max_matches_per_pair=args.max_matches_per_pair,
                             min_point_confidence=args.min_point_confidence,
                             max_cloud_points=args.max_cloud_points,
                             reach_radius=args.reach_radius,
                             sparse_view_max_images=args.sparse_view_max_images,
                             max_angle_deg=args.max_angle_deg,
                             max_translation_m=args.max_translation_m,
                             k_nearest=args.k_nearest,
                             seed=args.seed,
                             threads=args.threads,
                             enable_3d=False if args.no_3d else None)

    scene = load_scene(args.scene)
    if args.views:
        scene = first_views(scene, args.views).validate()

    result = run(scene, config)
    write_result(result, args.out, debug=args.debug)

    log_info(f"{result.num_classes} object classes written to {args.out} "
             f"in {time.perf_counter() - started:.2f} s")
    return 0


def _expected_objects(manifest_path: str):

    # Synthetic scenes record how many objects were placed
    spec_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), 'synth_spec.json')
    if not os.path.exists(spec_path):
        return None
    with open(spec_path, 'r', encoding='utf-8') as spec_file:
        return list(range(1, int(json.load(spec_file)['n_objects']) + 1))


def cmd_eval(args: argparse.Namespace) -> int:

    if len(args.result) != len(args.scene):
        raise SegFuseError(f"{len(args.result)} --result directories given for {len(args.scene)} --scene manifests")

    reports = [evaluate(read_result(result_dir), load_scene(manifest), expected_ids=_expected_objects(manifest))
               for result_dir, manifest in zip(args.result, args.scene)]
    report = reports[0] if len(reports) == 1 else combine_reports(reports)

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, 'metrics.json'), 'w', encoding='utf-8') as metrics_file:
            json.dump(report.to_dict(), metrics_file, indent=2)
            metrics_file.write('\n')
        report.per_object_frame().to_csv(os.path.join(args.out, 'metrics_per_object.csv'), index=False)

    means = report.means()
    utility = report.pixel_utility
    log_info("IoU F1 d_chamfer IoU_sel")
    log_info(report.table_row())
    log_info(f"precision: {'n/a' if means['precision'] is None else round(means['precision'], 4)}")
    log_info(f"pixel utility: mean {round(utility['mean'], 4)} median {round(utility['median'], 4)}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:

    spec = SynthSpec(n_objects=args.objects,
                     n_views=args.views,
                     width=args.width,
                     height=args.height,
                     overseg_k=args.overseg,
                     match_dropout=args.dropout,
                     spurious_rate=args.spurious,
                     pointmap_noise_sigma=args.noise,
                     match_stride=args.stride,
                     seed=args.seed).validate()

    scene, _ = build_synth_scene(spec, threads=args.threads)
    manifest_path = write_synth_scene(scene, spec, args.out)

    log_info(f"Synthetic scene written to {manifest_path}")
    return 0


def cmd_export_object(args: argparse.Namespace) -> int:

    result = read_result(args.result)
    extracted = extract_object(result, args.image, args.mask)
    if extracted.is_background:
        log_info(f"Mask {args.mask} of image {args.image} belongs to the background")

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_cloud_ply(extracted.points, args.out)

    log_info(f"Class {extracted.class_id}: {len(extracted.points)} points written to {args.out}")
    return 0


COMMANDS = {
    'segment': cmd_segment,
    'eval': cmd_eval,
    'synth': cmd_synth,
    'export-object': cmd_export_object,
}


def main(argv=None) -> int:
    '''
    Main driver of the tool. Returns the process exit code: 0 on success, 1 for input or
    configuration errors and 2 for internal errors.
    '''

    try:
        args = build_parser().parse_args(argv)
        set_verbose(not args.quiet)
        return COMMANDS[args.command](args)

    except SegFuseError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code

    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    except InvariantViolation as e:
        print(f"Internal error: {e}", file=sys.stderr)
        return e.exit_code

    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
