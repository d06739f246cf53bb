import re

from typing import Tuple


class Measure:

    @staticmethod
    def ratio() -> float:
        raise NotImplementedError('Measure::ratio()')

    def value(self) -> float:
        raise NotImplementedError('Measure::value()')


class StaticMeasure(Measure):
    _value: float

    def __init__(self, value: float):
        self._value = value

    @staticmethod
    def ratio() -> float:
        raise NotImplementedError()

    def value(self) -> float:
        return self._value * self.ratio()


class Meter(StaticMeasure):

    @staticmethod
    def ratio() -> float:
        return 1.0


class Centimeter(StaticMeasure):

    @staticmethod
    def ratio() -> float:
        return 0.01


class Millimeter(StaticMeasure):

    @staticmethod
    def ratio() -> float:
        return 0.001


def parse_measure(value: str) -> Measure:
    pattern = r'^\s*(?P<value>\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*(?P<unit>[a-zA-Z]*)\s*$'
    match = re.match(pattern, value)
    if not match:
        raise ValueError(f"Invalid distance value: '{value}'")

    float_value = float(match.group('value'))
    unit = match.group('unit').lower()

    canonical_units = {
        'm': Meter,
        'meter': Meter,
        'meters': Meter,
        'cm': Centimeter,
        'mm': Millimeter,
        'millimeter': Millimeter,
        'millimeters': Millimeter,
    }

    if unit and unit not in canonical_units:
        raise ValueError(f"Unknown unit: '{unit}'")

    # bare numbers are meters
    canonical_unit = canonical_units.get(unit, Meter)

    return canonical_unit(float_value)


def parse_range(value: str) -> Tuple[float, float]:
    """Parse an evaluation range such as ``0.1m:80m`` or ``0.1:50`` into meters."""
    parts = value.split(':')
    if len(parts) != 2:
        raise ValueError(f"Invalid range: '{value}' (expected <min>:<max>)")
    low = parse_measure(parts[0]).value()
    high = parse_measure(parts[1]).value()
    if not 0.0 < low < high:
        raise ValueError(f"Invalid range: '{value}' (need 0 < min < max)")
    return low, high
