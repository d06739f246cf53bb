import argparse
import logging
import os
import sys

from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence, Tuple, Union

import ssdepth.renderer

from ssdepth import evalkit, gradsuite
from ssdepth.config import config_hash, load_config, render_config
from ssdepth.diffcore.ops import OP_KINDS
from ssdepth.errors import ConfigError, SsdError
from ssdepth.manifest import RunManifest
from ssdepth.measures import parse_range
from ssdepth.streams import SeedStreams
from ssdepth.synthscene import NIGHT, RAIN, Dataset, SceneConfig, generate_split, write_split
from ssdepth.trainer import Checkpoint, LossLog, TrainConfig, train_student, train_teacher
from ssdepth.translate import ConditionSet, degrade_triplet, ingest_external, write_overlay

logger = logging.getLogger('ssdepth')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
DEGRADED_SPLITS = (('val-night', NIGHT, 2), ('val-rain', RAIN, 3))
EVAL_SPLITS = 'val-day,val-night,val-rain'


class UsageError(Exception):
    pass


class SsdArgumentParser(argparse.ArgumentParser):

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        sys.stderr.write(f'\nError: {message}\n')
        sys.exit(2)


class parse_obj_params(argparse.Action):
    def __call__(
        self,
        parser: argparse.ArgumentParser,
        namespace: argparse.Namespace,
        values: Union[str, Sequence[Any], None],
        option_string: Optional[str] = None
    ) -> None:
        params = getattr(namespace, self.dest, None)
        if params is None:
            params = []
        if type(values) != str:
            raise TypeError(f"Expected type string but got: {type(values).__name__}")
        if '=' not in values:
            parser.error(f"{option_string} expects key=value, got '{values}'")
        key, value = values.split('=', 1)
        params.append((key.strip(), value.strip()))
        setattr(namespace, self.dest, params)


def manifest_arguments(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if not callable(v)}


def train_overrides(args: argparse.Namespace) -> List[Tuple[str, str]]:
    overrides = list(args.overrides or [])
    if args.seed is not None:
        overrides.append(('seed', str(args.seed)))
    return overrides


def cmd_gen_data(args: argparse.Namespace) -> List[str]:
    if args.n < 1:
        raise UsageError(f'--n must be at least 1, got {args.n}')
    config = load_config(SceneConfig, args.config, args.overrides or [])
    manifest = RunManifest('gen-data', config_hash(config), args.seed, arguments=manifest_arguments(args))
    manifest.write(args.out)

    streams = SeedStreams(args.seed)
    train = generate_split(config, streams, 'train', args.n)
    write_split(args.out, 'train', train)
    val_day = generate_split(config, streams, 'val-day', args.n)
    write_split(args.out, 'val-day', val_day)

    conditions = ConditionSet()
    outputs = [os.path.join(args.out, 'train'), os.path.join(args.out, 'val-day')]
    for split, condition, code in DEGRADED_SPLITS:
        degraded = [
            degrade_triplet(t, condition, int(streams.generator('degrade', code, i).integers(0, 2 ** 31 - 1)), conditions)
            for i, t in enumerate(val_day)
        ]
        write_split(args.out, split, degraded)
        outputs.append(os.path.join(args.out, split))
    manifest.finish(args.out, outputs)
    return outputs


def _write_config(directory: str, config: TrainConfig) -> str:
    path = os.path.join(directory, 'config.txt')
    with open(path, 'w', encoding='utf8') as handle:
        handle.write(render_config(config))
    return path


def cmd_train_teacher(args: argparse.Namespace) -> List[str]:
    config = load_config(TrainConfig, args.config, train_overrides(args))
    manifest = RunManifest('train-teacher', config_hash(config), config.seed, arguments=manifest_arguments(args))
    manifest.write(args.out)

    triplets = Dataset(args.data, 'train').load_all()
    log = LossLog(os.path.join(args.out, 'teacher_loss.csv'))
    try:
        checkpoint = train_teacher(triplets, config, log)
    finally:
        log.close()
    path = os.path.join(args.out, 'teacher.ssdf')
    checkpoint.save(path)
    outputs = [path, os.path.join(args.out, 'teacher_loss.csv'), _write_config(args.out, config)]
    manifest.finish(args.out, outputs)
    return outputs


def cmd_train_student(args: argparse.Namespace) -> List[str]:
    config = load_config(TrainConfig, args.config, train_overrides(args))
    manifest = RunManifest('train-student', config_hash(config), config.seed, arguments=manifest_arguments(args))
    manifest.write(args.out)

    dataset = Dataset(args.data, 'train')
    teacher = Checkpoint.load(args.teacher)
    overlay = None
    if args.overlay:
        overlay = ingest_external(args.overlay, dataset, ConditionSet.parse(config.conditions))
    log = LossLog(os.path.join(args.out, 'student_loss.csv'))
    try:
        checkpoint = train_student(dataset.load_all(), teacher, config, overlay, log)
    finally:
        log.close()
    path = os.path.join(args.out, 'student.ssdf')
    checkpoint.save(path)
    outputs = [path, os.path.join(args.out, 'student_loss.csv'), _write_config(args.out, config)]
    manifest.finish(args.out, outputs)
    return outputs


def cmd_eval(args: argparse.Namespace) -> List[str]:
    if not args.models:
        raise UsageError('at least one --model name=checkpoint is required')
    if args.scaling not in evalkit.SCALING_MODES:
        raise UsageError(f"--scaling must be one of {', '.join(evalkit.SCALING_MODES)}")
    try:
        depth_range = parse_range(args.range)
    except ValueError as e:
        raise UsageError(str(e))
    splits = [s.strip() for s in args.splits.split(',') if s.strip()]
    manifest = RunManifest('eval', '', 0, arguments=manifest_arguments(args))
    manifest.write(args.out)

    datasets = {split: Dataset(args.data, split).load_all() for split in splits}
    reports = []
    for name, path in args.models:
        net = Checkpoint.load(path).depth_net()
        for split in splits:
            reports.append(evalkit.evaluate_split(net, datasets[split], depth_range, args.scaling, split, name))
    if args.pooled:
        reports.extend(evalkit.pooled_reports(reports))
    outputs = evalkit.emit_report(reports, args.out)
    print(evalkit.format_table(reports))
    manifest.finish(args.out, outputs)
    return outputs


def cmd_translate(args: argparse.Namespace) -> List[str]:
    try:
        conditions = ConditionSet.parse(args.conditions)
    except ValueError as e:
        raise UsageError(str(e))
    manifest = RunManifest('translate', '', args.seed, arguments=manifest_arguments(args))
    manifest.write(args.out)
    samples = Dataset(args.data, args.split).load_all()
    write_overlay(args.out, samples, conditions, args.seed)
    manifest.finish(args.out, [args.out])
    return [args.out]


def cmd_gradcheck(args: argparse.Namespace) -> List[str]:
    for kind in args.faults or []:
        if kind not in OP_KINDS:
            raise UsageError(f"unknown op kind '{kind}' (known: {', '.join(OP_KINDS)})")
    manifest = RunManifest('gradcheck', '', args.seed, arguments=manifest_arguments(args))
    manifest.write(args.out)
    reports = gradsuite.run_suite(args.cases or None, args.seed, args.faults or ())
    path = os.path.join(args.out, 'gradcheck.txt')
    with open(path, 'w', encoding='utf8') as handle:
        for report in reports:
            print(report)
            handle.write(f'{report}\n')
    manifest.finish(args.out, [path])
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise SsdError(f"gradient check failed for: {', '.join(failed)}")
    return [path]


def cmd_plot(args: argparse.Namespace) -> List[str]:
    paths = evalkit.chart_paths(args.report)
    if paths is None:
        raise SsdError(f'no metric charts found in {args.report}')
    directory = os.path.dirname(os.path.abspath(args.out))
    # <image>.manifest.json beside the image, never the directory's manifest.json
    name = os.path.splitext(os.path.basename(args.out))[0] + '.manifest.json'
    manifest = RunManifest('plot', '', 0, arguments=manifest_arguments(args))
    manifest.write(directory, name)
    image = ssdepth.renderer.composite_png(paths)
    image.save(args.out, 'PNG')
    manifest.finish(directory, [args.out], name)
    return [args.out]


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument('--config', type=str, help='flat key = value config file')
    sub.add_argument('--set', dest='overrides', action=parse_obj_params, help='override a config key, key=value')


def build_parser() -> argparse.ArgumentParser:
    parser = SsdArgumentParser(prog='ssdepth', description='Robust monocular depth self-training at desk scale.')
    parser.add_argument('--log-level', type=str, default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', parser_class=SsdArgumentParser)
    commands.required = True

    sub = commands.add_parser('gen-data', help='render synthetic train/val splits')
    _common(sub)
    sub.add_argument('--n', type=int, required=True, help='triplets per split')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--out', type=str, required=True)
    sub.set_defaults(func=cmd_gen_data)

    sub = commands.add_parser('train-teacher', help='self-supervised teacher training on day-clear triplets')
    _common(sub)
    sub.add_argument('--data', type=str, required=True)
    sub.add_argument('--out', type=str, required=True)
    sub.add_argument('--seed', type=int)
    sub.set_defaults(func=cmd_train_teacher)

    sub = commands.add_parser('train-student', help='distil a teacher checkpoint into a robust student')
    _common(sub)
    sub.add_argument('--data', type=str, required=True)
    sub.add_argument('--teacher', type=str, required=True)
    sub.add_argument('--out', type=str, required=True)
    sub.add_argument('--overlay', type=str, help='directory of externally translated frames')
    sub.add_argument('--seed', type=int)
    sub.set_defaults(func=cmd_train_student)

    sub = commands.add_parser('eval', help='evaluate checkpoints and write the metrics report')
    sub.add_argument('--data', type=str, required=True)
    sub.add_argument('--model', dest='models', action=parse_obj_params, help='name=checkpoint path')
    sub.add_argument('--splits', type=str, default=EVAL_SPLITS)
    sub.add_argument('--scaling', type=str, default=evalkit.MEDIAN)
    sub.add_argument('--range', type=str, default='0.1m:80m')
    sub.add_argument('--pooled', action='store_true', help='add an all-conditions row per model')
    sub.add_argument('--out', type=str, required=True)
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser('translate', help='export built-in degradations as an overlay')
    sub.add_argument('--data', type=str, required=True)
    sub.add_argument('--split', type=str, default='train')
    sub.add_argument('--conditions', type=str, default='night,rain')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--out', type=str, required=True)
    sub.set_defaults(func=cmd_translate)

    sub = commands.add_parser('gradcheck', help='finite-difference check of every op and loss')
    sub.add_argument('--case', dest='cases', action='append', choices=gradsuite.case_names())
    sub.add_argument('--inject-fault', dest='faults', action='append', metavar='KIND')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--out', type=str, required=True)
    sub.set_defaults(func=cmd_gradcheck)

    sub = commands.add_parser('plot', help='compose report charts into one PNG')
    sub.add_argument('--report', type=str, required=True)
    sub.add_argument('--out', type=str, required=True)
    sub.set_defaults(func=cmd_plot)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

    func: Callable[[argparse.Namespace], List[str]] = args.func
    try:
        outputs = func(args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f'\nError: {e}\n')
        return 2
    except (SsdError, OSError) as e:
        logger.error('%s failed: %s', args.command, e)
        sys.stderr.write(f'Error: {e}\n')
        return 1
    except ValueError as e:
        # invalid argument values that slipped past the parser
        parser.print_usage(sys.stderr)
        sys.stderr.write(f'\nError: {e}\n')
        return 2
    for path in outputs:
        logger.info('wrote %s', path)
    return 0


if __name__ == '__main__':
    sys.exit(main())
