"""Desk-scale experiments.

The reduced baseline run is always on; the full experiments take minutes each
and only run with ``SSD_SLOW=1``.
"""

import contextlib
import io
import json
import os
import tempfile
import unittest

from typing import Any, Dict, List

import numpy as np

from ssdepth.__main__ import main
from ssdepth.camgeom import PoseBatch, synthesize_view
from ssdepth.diffcore import Tensor
from ssdepth.evalkit import MEDIAN, evaluate_split
from ssdepth.losses import INVALID_PENALTY, KEEP_TEACHER_WORSE, photometric_error, teacher_mask
from ssdepth.streams import SeedStreams
from ssdepth.synthscene import NIGHT, SampleTriplet, SceneConfig, generate_split
from ssdepth.trainer import LossLog, TrainConfig, train_student, train_teacher
from ssdepth.translate import degrade_triplet

SLOW = os.environ.get('SSD_SLOW') == '1'


def as_batch(image: np.ndarray) -> Tensor:
    return Tensor(image.transpose(2, 0, 1)[None])


def as_depth(depth: np.ndarray) -> Tensor:
    return Tensor(depth[None, None])


def night_split(triplets: List[SampleTriplet], seed: int) -> List[SampleTriplet]:
    streams = SeedStreams(seed)
    return [
        degrade_triplet(t, NIGHT, int(streams.generator('degrade', 0, i).integers(0, 2 ** 31 - 1)))
        for i, t in enumerate(triplets)
    ]


@unittest.skipUnless(SLOW, 'set SSD_SLOW=1 to run desk-scale experiments')
class TestGeometryOnGeneratedData(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls.triplets = generate_split(SceneConfig(), SeedStreams(0), 'train', 100)

    def test_ground_truth_warp_reproduces_current_frame(self) -> None:
        errors = []
        for t in self.triplets:
            depth = as_depth(t.gt_depth)
            target = as_batch(t.current)
            for frame, pose in ((t.frames[0], t.gt_poses[0]), (t.frames[2], t.gt_poses[1])):
                warped, valid = synthesize_view(as_batch(frame), depth, PoseBatch.from_poses([pose]), t.K)
                pe = photometric_error(target, warped).data
                errors.append(float(pe[valid].mean()))
        self.assertLess(float(np.mean(errors)), 0.01)

    def test_mask_keeps_ground_truth_teacher(self) -> None:
        coverages = []
        for t in self.triplets[:20]:
            gt = as_depth(t.gt_depth)
            adjacent = [as_batch(t.frames[0]), as_batch(t.frames[2])]
            poses = [PoseBatch.from_poses([p]) for p in t.gt_poses]
            mask = teacher_mask(as_batch(t.current), adjacent, Tensor(gt.data * 2.0), gt, poses, t.K)
            valid = mask.teacher_pe < INVALID_PENALTY
            coverages.append(mask.mask[valid].mean())

            same = teacher_mask(as_batch(t.current), adjacent, gt, gt, poses, t.K)
            self.assertTrue(same.mask.all())
            literal = teacher_mask(as_batch(t.current), adjacent, gt, gt, poses, t.K, KEEP_TEACHER_WORSE)
            self.assertFalse(literal.mask.any())
        self.assertGreaterEqual(float(np.mean(coverages)), 0.95)


@unittest.skipUnless(SLOW, 'set SSD_SLOW=1 to run desk-scale experiments')
class TestTraining(unittest.TestCase):

    def test_teacher_learns_desk_scenes(self) -> None:
        config = SceneConfig()
        streams = SeedStreams(0)
        train = generate_split(config, streams, 'train', 500)
        held_out = generate_split(config, streams, 'val-day', 50)
        log = LossLog()
        teacher = train_teacher(train, TrainConfig(seed=0), log)
        means = log.epoch_means()
        self.assertLess(means[-1], 0.5 * means[0])
        report = evaluate_split(teacher.depth_net(), held_out, scaling=MEDIAN, split='val-day')
        self.assertLess(report.absRel, 0.15)

    def test_student_is_no_worse_at_night(self) -> None:
        config = SceneConfig()
        for seed in range(3):
            streams = SeedStreams(seed)
            train = generate_split(config, streams, 'train', 200)
            day = generate_split(config, streams, 'val-day', 40)
            night = night_split(day, seed)
            settings = TrainConfig(seed=seed, epochs=10)
            teacher = train_teacher(train, settings)
            student = train_student(train, teacher, settings)

            results: Dict[str, Dict[str, float]] = {}
            for name, checkpoint in (('teacher', teacher), ('student', student)):
                net = checkpoint.depth_net()
                results[name] = {
                    'day': evaluate_split(net, day).absRel,
                    'night': evaluate_split(net, night).absRel,
                }
            self.assertLessEqual(results['student']['night'], results['teacher']['night'], f'seed {seed}')
            self.assertLessEqual(results['student']['day'], 1.1 * results['teacher']['day'], f'seed {seed}')


def load_baseline() -> Dict[str, Any]:
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'fixtures', 'desk_baseline.json')
    with open(path, encoding='utf8') as handle:
        return dict(json.load(handle))


class TestBaseline(unittest.TestCase):
    """Reduced seeded teacher run checked against the committed baseline bounds."""

    def test_reduced_run_meets_baseline(self) -> None:
        baseline = load_baseline()
        bounds = baseline['bounds']
        streams = SeedStreams(baseline['scene_seed'])
        train = generate_split(SceneConfig(), streams, 'train', baseline['train_triplets'])
        held_out = generate_split(SceneConfig(), streams, 'val-day', baseline['val_triplets'])
        log = LossLog()
        teacher = train_teacher(train, TrainConfig(**baseline['config']), log)
        means = log.epoch_means()
        self.assertEqual(len(means), baseline['config']['epochs'])
        self.assertTrue(np.all(np.isfinite(means)))
        self.assertLessEqual(means[-1], bounds['loss_ratio_max'] * means[0])

        report = evaluate_split(teacher.depth_net(), held_out, scaling=MEDIAN, split='val-day')
        self.assertLessEqual(report.absRel, bounds['absRel_max'])
        self.assertLessEqual(report.sqRel, bounds['sqRel_max'])
        self.assertLessEqual(report.RMSE, bounds['RMSE_max'])
        self.assertGreaterEqual(report.delta1, bounds['delta1_min'])


def tree_bytes(root: str) -> Dict[str, bytes]:
    out = {}
    for directory, _, files in os.walk(root):
        for name in files:
            if name == 'manifest.json':
                continue
            path = os.path.join(directory, name)
            with open(path, 'rb') as handle:
                out[os.path.relpath(path, root)] = handle.read()
    return out


@unittest.skipUnless(SLOW, 'set SSD_SLOW=1 to run desk-scale experiments')
class TestReproducibility(unittest.TestCase):

    def pipeline(self, root: str) -> None:
        data = os.path.join(root, 'data')
        teacher = os.path.join(root, 'teacher', 'teacher.ssdf')
        student = os.path.join(root, 'student', 'student.ssdf')
        quick = ['--set', 'epochs=2', '--set', 'batch_size=2']
        commands = [
            ['gen-data', '--n', '4', '--seed', '5', '--out', data],
            ['train-teacher', '--data', data, '--out', os.path.dirname(teacher)] + quick,
            ['train-student', '--data', data, '--teacher', teacher, '--out', os.path.dirname(student)] + quick,
            ['eval', '--data', data, '--out', os.path.join(root, 'report'), '--model', f'teacher={teacher}', '--model', f'student={student}'],
        ]
        for argv in commands:
            with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
                self.assertEqual(main(['--log-level', 'WARNING'] + argv), 0, argv[0])

    def test_rerun_is_bit_identical(self) -> None:
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            self.pipeline(first)
            self.pipeline(second)
            a, b = tree_bytes(first), tree_bytes(second)
        self.assertEqual(sorted(a), sorted(b))
        for name in a:
            self.assertEqual(a[name], b[name], name)
