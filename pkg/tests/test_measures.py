import unittest

from ssdepth.measures import *


class TestMeasures(unittest.TestCase):

    def test_static_measure(self) -> None:
        mm = Millimeter(10)
        self.assertAlmostEqual(mm.value(), 0.01)

        cm = Centimeter(250)
        self.assertAlmostEqual(cm.value(), 2.5)

        self.assertAlmostEqual(Meter(80).value(), 80.0)

    def test_parse_measure(self) -> None:
        self.assertAlmostEqual(parse_measure('80m').value(), 80.0)
        self.assertAlmostEqual(parse_measure('80 meters').value(), 80.0)
        self.assertAlmostEqual(parse_measure('100mm').value(), 0.1)
        self.assertAlmostEqual(parse_measure('0.1').value(), 0.1)
        self.assertAlmostEqual(parse_measure('1e-3 m').value(), 0.001)

    def test_parse_measure_rejects_garbage(self) -> None:
        with self.assertRaises(ValueError):
            parse_measure('ten meters')
        with self.assertRaises(ValueError):
            parse_measure('3furlongs')

    def test_parse_range(self) -> None:
        self.assertEqual(parse_range('0.1m:80m'), (0.1, 80.0))
        low, high = parse_range('100mm:50')
        self.assertAlmostEqual(low, 0.1)
        self.assertAlmostEqual(high, 50.0)

    def test_parse_range_rejects_inverted(self) -> None:
        with self.assertRaises(ValueError):
            parse_range('80m:0.1m')
        with self.assertRaises(ValueError):
            parse_range('0.1m')
