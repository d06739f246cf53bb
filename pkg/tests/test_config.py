import os
import tempfile
import unittest

from unittest import mock

from ssdepth.config import *
from ssdepth.errors import ConfigError, ShapeError
from ssdepth.streams import SeedStreams
from ssdepth.synthscene import SceneConfig
from ssdepth.trainer import TrainConfig


class TestConfigFiles(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def write(self, text: str) -> str:
        path = os.path.join(self.tmp.name, 'train.cfg')
        with open(path, 'w', encoding='utf8') as handle:
            handle.write(text)
        return path

    def test_load_with_units_and_comments(self) -> None:
        path = self.write('# desk run\nepochs = 3\n\ndepth_max = 50m  # far plane\nz_min = 2mm\nstudent_smoothness = yes\n')
        config = load_config(TrainConfig, path)
        self.assertEqual(config.epochs, 3)
        self.assertEqual(config.depth_max, 50.0)
        self.assertAlmostEqual(config.z_min, 0.002)
        self.assertTrue(config.student_smoothness)
        self.assertEqual(config.batch_size, TrainConfig().batch_size)

    def test_overrides_win(self) -> None:
        path = self.write('epochs = 3\n')
        config = load_config(TrainConfig, path, [('epochs', '5'), ('mask_convention', 'keep-teacher-worse')])
        self.assertEqual(config.epochs, 5)
        self.assertEqual(config.mask_convention, 'keep-teacher-worse')

    def test_scene_config(self) -> None:
        config = load_config(SceneConfig, None, [('base_depth', '700cm'), ('width', '32')])
        self.assertEqual(config.base_depth, 7.0)
        self.assertEqual(config.width, 32)

    def test_errors(self) -> None:
        with self.assertRaises(ConfigError):
            load_config(TrainConfig, None, [('epoch', '3')])
        with self.assertRaises(ConfigError):
            load_config(TrainConfig, None, [('epochs', 'three')])
        with self.assertRaises(ConfigError):
            load_config(TrainConfig, None, [('student_smoothness', 'maybe')])
        with self.assertRaises(ConfigError) as ctx:
            load_config(TrainConfig, self.write('epochs = 1\nepochs 2\n'))
        self.assertIn(':2:', str(ctx.exception))

    def test_validation(self) -> None:
        with self.assertRaises(ConfigError):
            TrainConfig(mask_convention='strict')
        with self.assertRaises(ConfigError):
            TrainConfig(conditions='night,fog')
        with self.assertRaises(ConfigError):
            TrainConfig(depth_min=10.0, depth_max=1.0)
        with self.assertRaises(ConfigError):
            TrainConfig(batch_size=0)
        self.assertEqual(TrainConfig(epochs=0).epochs, 0)

    def test_literal_spellings_are_accepted(self) -> None:
        self.assertEqual(TrainConfig(mask_convention='eq5-literal').mask_convention, 'eq5-literal')
        self.assertEqual(TrainConfig(schedule_mode='paper-literal').schedule_mode, 'paper-literal')
        with self.assertRaises(ConfigError):
            TrainConfig(schedule_mode='literal')

    def test_render_and_hash(self) -> None:
        text = render_config(TrainConfig())
        lines = text.splitlines()
        self.assertEqual(lines, sorted(lines))
        self.assertIn('lr_depth = 0.001', lines)
        self.assertIn('student_smoothness = false', lines)
        self.assertEqual(config_hash(TrainConfig()), config_hash(TrainConfig()))
        self.assertNotEqual(config_hash(TrainConfig()), config_hash(TrainConfig(seed=1)))
        self.assertEqual(load_config(TrainConfig, self.write(text)), TrainConfig())

    def test_str_to_bool(self) -> None:
        self.assertTrue(str_to_bool('True'))
        self.assertFalse(str_to_bool('no'))
        with self.assertRaises(ValueError):
            str_to_bool('2')


class TestWorkers(unittest.TestCase):

    def test_env_caps_workers(self) -> None:
        with mock.patch.dict(os.environ, {THREADS_ENV: '3'}):
            self.assertEqual(worker_count(), 3)
        with mock.patch.dict(os.environ, {THREADS_ENV: '0'}):
            with self.assertRaises(ConfigError):
                worker_count()
        with mock.patch.dict(os.environ, {THREADS_ENV: 'many'}):
            with self.assertRaises(ConfigError):
                worker_count()

    def test_parallel_map_keeps_order(self) -> None:
        for threads in ('1', '4'):
            with mock.patch.dict(os.environ, {THREADS_ENV: threads}):
                self.assertEqual(parallel_map(lambda x: x * x, list(range(20))), [x * x for x in range(20)])
        self.assertEqual(parallel_map(lambda x: x, []), [])


class TestSeedStreams(unittest.TestCase):

    def test_named_generators_are_reproducible(self) -> None:
        a = SeedStreams(4).generator('data', 1, 2).random(5)
        b = SeedStreams(4).generator('data', 1, 2).random(5)
        self.assertEqual(a.tolist(), b.tolist())

    def test_streams_are_independent(self) -> None:
        streams = SeedStreams(4)
        self.assertNotEqual(streams.generator('data').random(), streams.generator('init').random())
        self.assertNotEqual(SeedStreams(4).generator('data').random(), SeedStreams(5).generator('data').random())

    def test_stream_is_stateful(self) -> None:
        streams = SeedStreams(0)
        first = streams.stream('degrade').random()
        second = streams.stream('degrade').random()
        self.assertNotEqual(first, second)
        self.assertEqual(first, SeedStreams(0).generator('degrade').random())

    def test_negative_seed(self) -> None:
        with self.assertRaises(ValueError):
            SeedStreams(-1)


class TestErrors(unittest.TestCase):

    def test_shape_error_is_value_error(self) -> None:
        error = ShapeError('matmul', [(2, 3), (2, 3)], 'inner dimensions differ')
        self.assertIsInstance(error, ValueError)
        self.assertEqual(str(error), 'matmul: incompatible shapes (2, 3), (2, 3) (inner dimensions differ)')
