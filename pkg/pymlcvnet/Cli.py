"""
Command-line entry point: mlcvnet synth | train | detect | eval | ablate | gradcheck | bench.

Exit status is 0 on success, 1 on an argument error and 2 on a runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .Config import SCHEDULE_PRESETS, VARIANTS, ConfigBundle, ModelConfig, load_config_file
from .Data import (generate_dataset, load_detections_json, load_ply, load_scene_dir, load_scene_json,
                   save_detections_json, save_ply, save_scene)
from .Detector import MLCVNet, detect, vote_cloud
from .Diagnostics import run_benchmarks, run_gradcheck_suite
from .Evaluation import evaluate, format_table, mean_result, write_report
from .Exceptions import ArgumentError, MLCVNetError
from .Trainer import run_ablation, split_dataset, train

logger = logging.getLogger(__name__)

LOG_LEVEL_VARIABLE = 'MLCVNET_LOG_LEVEL'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map onto exit status 1."""

    def error(self, message):
        raise ArgumentError(f'{self.prog}: {message}', details=self.format_usage())


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.environ.get(LOG_LEVEL_VARIABLE) or 'WARNING').upper()
    if level not in LOG_LEVELS:
        raise ArgumentError(f'Unknown log level {level!r}. Valid levels are {list(LOG_LEVELS)}.')
    logging.basicConfig(level=getattr(logging, level), format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def _probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'{text!r} is not a number')
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f'{value} is not in [0, 1]')
    return value


def _thresholds(text: str) -> List[float]:
    values = []
    for part in text.split(','):
        try:
            value = float(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f'{part!r} is not a number')
        if not 0.0 < value <= 1.0:
            raise argparse.ArgumentTypeError(f'IoU threshold {value} is not in (0, 1]')
        values.append(value)
    return values


def _bundle(args) -> ConfigBundle:
    return load_config_file(getattr(args, 'config', None))


def _load_scenes(directory: str, bundle: ConfigBundle):
    scenes = load_scene_dir(directory, bundle.model.class_names)
    if not scenes:
        raise ArgumentError(f'No scenes (<id>.ply + <id>.json) found in {directory}.')
    return scenes


def cmd_synth(args) -> int:
    bundle = _bundle(args)
    scene_config = bundle.scene
    if scene_config.class_names != bundle.model.class_names:
        logger.warning(f'Scene classes {scene_config.class_names} differ from model classes '
                       f'{bundle.model.class_names}.')
    scenes = generate_dataset(args.seed, args.count, scene_config, progress=True)
    for scene in scenes:
        save_scene(args.out, scene)
    print(f'Wrote {len(scenes)} scenes to {args.out}.')
    return 0


def cmd_train(args) -> int:
    bundle = _bundle(args)
    train_config = bundle.train
    if args.preset:
        train_config = dataclasses.replace(train_config, **SCHEDULE_PRESETS[args.preset])
    if args.val_fraction is not None:
        train_config = dataclasses.replace(train_config, val_fraction=args.val_fraction)
    scenes = _load_scenes(args.data, bundle)
    train_scenes, val_scenes = split_dataset(scenes, train_config.val_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else out.parent / 'metrics.jsonl'
    result = train(train_scenes, bundle.model, epochs=args.epochs, seed=args.seed, train_config=train_config,
                   val_scenes=val_scenes, checkpoint_path=out, metrics_path=metrics_path, progress=True)
    if result.metrics:
        print(json.dumps(result.metrics[-1]))
    print(f'Wrote checkpoint {out} and metric log {metrics_path}.')
    return 0


def cmd_detect(args) -> int:
    model = MLCVNet.from_checkpoint(args.ckpt)
    cloud = load_ply(args.input)
    outputs: list = []
    detections = detect(cloud, model, args.objectness, args.nms, outputs=outputs)
    scene_id = Path(args.input).stem
    save_detections_json(args.out, scene_id, [d.to_dict(model.config.class_names) for d in detections])
    if args.dump_votes:
        save_ply(args.dump_votes, vote_cloud(outputs[0]))
    print(f'{scene_id}: {len(detections)} detections written to {args.out}.')
    return 0


def cmd_eval(args) -> int:
    class_names = _bundle(args).model.class_names
    ground_truth = {}
    for path in sorted(Path(args.gt).glob('*.json')):
        scene_id, gt, _ = load_scene_json(path, class_names)
        ground_truth[scene_id] = gt
    if not ground_truth:
        raise ArgumentError(f'No ground-truth JSON files found in {args.gt}.')
    detections = {}
    for path in sorted(Path(args.dets).glob('*.json')):
        scene_id, records = load_detections_json(path)
        converted = []
        for name, score, box in records:
            if name not in class_names:
                raise ArgumentError(f'{path}: unknown class {name!r}. Valid classes are {class_names}.')
            converted.append((class_names.index(name), score, box))
        detections[scene_id] = converted
    missing = sorted(set(ground_truth) - set(detections))
    if missing:
        logger.warning(f'{len(missing)} scenes have no detection file; their objects count as misses.')
    result = evaluate(detections, ground_truth, class_names, args.iou)
    write_report(args.report, result)
    for threshold in result.thresholds:
        print(format_table(class_names, {'model': result}, threshold))
    return 0


def cmd_ablate(args) -> int:
    bundle = _bundle(args)
    scenes = _load_scenes(args.data, bundle)
    train_scenes, held_out = split_dataset(scenes, args.holdout)
    report = run_ablation(train_scenes, held_out, bundle.model, bundle.train, seed=args.seed, runs=args.runs,
                          epochs=args.epochs, out_dir=args.out, progress=True)
    summary: Dict[str, dict] = {}
    means = {}
    for name, runs in report.items():
        means[name] = mean_result([run.result for run in runs])
        summary[name] = {
            'mean': means[name].to_dict(),
            'runs': [{'seed': run.seed, 'final_loss': run.final_loss, **run.result.to_dict()} for run in runs],
        }
    document = {'train_scenes': len(train_scenes), 'held_out_scenes': len(held_out), 'variants': summary}
    Path(args.out, 'report.json').write_text(json.dumps(document, indent=2))
    for threshold in (0.25, 0.5):
        print(format_table(bundle.model.class_names, means, threshold))
    return 0


def cmd_gradcheck(args) -> int:
    outcomes = run_gradcheck_suite(seed=args.seed, names=args.only)
    for outcome in outcomes:
        status = 'ok' if outcome.passed else 'FAIL'
        print(f'{outcome.name:<32} {outcome.error:.3e} < {outcome.tolerance:g}  {status}  ({outcome.seconds:.2f}s)')
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        logger.error(f'Gradient checks failed: {failed}')
        return 2
    return 0


def cmd_bench(args) -> int:
    bundle = _bundle(args)
    config = ModelConfig.toy(class_names=bundle.model.class_names) if args.toy else bundle.model
    report = run_benchmarks(config, repeats=args.repeats, seed=args.seed)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='mlcvnet', description='Desk-scale 3D object detection with multi-level context voting.')
    parser.add_argument('--log-level', choices=LOG_LEVELS, type=str.upper,
                        help=f'Logging level (default: ${LOG_LEVEL_VARIABLE} or WARNING).')
    commands = parser.add_subparsers(dest='command', required=True, metavar='command')

    def command(name: str, handler, help_text: str, config: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        if config:
            sub.add_argument('--config', help='JSON config file with optional model/scene/train sections.')
        return sub

    sub = command('synth', cmd_synth, 'Generate synthetic scenes as PLY + JSON.')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--count', type=int, required=True)
    sub.add_argument('--out', required=True, help='Output directory.')

    sub = command('train', cmd_train, 'Train a detector on a scene directory.')
    sub.add_argument('--data', required=True, help='Directory of <id>.ply + <id>.json scenes.')
    sub.add_argument('--out', required=True, help='Checkpoint path.')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--epochs', type=int, help='Override the configured epoch count.')
    sub.add_argument('--val-fraction', type=_probability, help='Fraction of scenes held out for periodic mAP.')
    sub.add_argument('--preset', choices=sorted(SCHEDULE_PRESETS), help='Named learning-rate schedule.')
    sub.add_argument('--metrics', help='Metric log path (default: metrics.jsonl next to the checkpoint).')

    sub = command('detect', cmd_detect, 'Detect objects in one PLY cloud.', config=False)
    sub.add_argument('--ckpt', required=True)
    sub.add_argument('--in', dest='input', required=True, help='Input PLY.')
    sub.add_argument('--out', required=True, help='Detection JSON.')
    sub.add_argument('--objectness', type=_probability, help='Objectness threshold (default from checkpoint).')
    sub.add_argument('--nms', type=_probability, help='NMS IoU threshold (default from checkpoint).')
    sub.add_argument('--dump-votes', help='Write the voted centers to this PLY.')

    sub = command('eval', cmd_eval, 'Compute per-class AP and mAP for a detection directory.')
    sub.add_argument('--dets', required=True, help='Directory of detection JSON files.')
    sub.add_argument('--gt', required=True, help='Directory of scene JSON files.')
    sub.add_argument('--iou', type=_thresholds, default=[0.25, 0.5], help='Comma-separated IoU thresholds.')
    sub.add_argument('--report', required=True, help='Report JSON path.')

    sub = command('ablate', cmd_ablate, f'Train and compare the variants {", ".join(VARIANTS)}.')
    sub.add_argument('--data', required=True)
    sub.add_argument('--out', required=True, help='Output directory for checkpoints and report.json.')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--runs', type=int, default=1, help='Seeds per variant; the report gives the mean.')
    sub.add_argument('--epochs', type=int)
    sub.add_argument('--holdout', type=_probability, default=0.2, help='Fraction of scenes held out.')

    sub = command('gradcheck', cmd_gradcheck, 'Run the finite-difference gradient suite.', config=False)
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--only', nargs='*', help='Run only checks whose names start with these prefixes.')

    sub = command('bench', cmd_bench, 'Time the kernels and compare baseline and full model cost.')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--repeats', type=int, default=3)
    sub.add_argument('--toy', action='store_true', help='Use the reduced toy model sizes.')
    sub.add_argument('--out', help='Also write the JSON report here.')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
    except ArgumentError as e:
        if e.details:
            print(e.details, file=sys.stderr, end='')
        print(f'error: {e}', file=sys.stderr)
        return 1
    try:
        return args.handler(args)
    except ArgumentError as e:
        logger.error(f'{args.command}: {e}')
        print(f'error: {e}', file=sys.stderr)
        return 1
    except (MLCVNetError, OSError) as e:
        logger.error(f'{args.command} failed: {e}')
        print(f'error: {e}', file=sys.stderr)
        return 2
