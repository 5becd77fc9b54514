"""
Ordered, weighted relevance label spaces and the raw-label parsing / gain rules
for each supported dataset.
"""

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from models import ConfigValidationError, LabelParseError


@dataclass(frozen=True)
class LabelSpace:
    """Labels ordered most-relevant first, with per-label weights and NDCG gains"""
    name: str
    labels: Tuple[str, ...]
    weights: Tuple[float, ...]
    gains: Tuple[float, ...]
    continuous: bool = False
    value_range: Tuple[float, float] = (0.0, 0.0)
    exponential_gain: bool = False

    def __post_init__(self):
        if self.continuous:
            low, high = self.value_range
            if not (0.0 <= low < high):
                raise ConfigValidationError(f"Invalid value range for '{self.name}': {self.value_range}")
            return
        if not self.labels:
            raise ConfigValidationError(f"Label space '{self.name}' has no labels")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigValidationError(f"Label space '{self.name}' has duplicate labels")
        if len(self.weights) != len(self.labels) or len(self.gains) != len(self.labels):
            raise ConfigValidationError(f"Label space '{self.name}' needs one weight and gain per label")
        if any(w < 0 for w in self.weights) or any(g < 0 for g in self.gains):
            raise ConfigValidationError(f"Label space '{self.name}' has negative weights or gains")
        for upper, lower in zip(self.weights, self.weights[1:]):
            if not upper > lower:
                raise ConfigValidationError(f"Weights must strictly decrease in '{self.name}': {self.weights}")
        for upper, lower in zip(self.gains, self.gains[1:]):
            if upper < lower:
                raise ConfigValidationError(f"Gains must not increase in '{self.name}': {self.gains}")

    @property
    def top_label(self) -> str:
        return self.labels[0]

    @property
    def least_label(self) -> str:
        return self.labels[-1]

    def rank_of(self, label: str) -> int:
        """0 for the most relevant label"""
        return self.labels.index(label)

    def weight(self, label: str) -> float:
        return self.weights[self.rank_of(label)]

    def weight_map(self) -> Dict[str, float]:
        return dict(zip(self.labels, self.weights))

    def adjacent_pairs(self) -> List[Tuple[str, str]]:
        return list(zip(self.labels, self.labels[1:]))

    def to_dict(self) -> Dict:
        data = {
            'name': self.name,
            'labels': list(self.labels),
            'weights': list(self.weights),
            'gains': list(self.gains),
            'exponential_gain': self.exponential_gain,
        }
        if self.continuous:
            data['continuous'] = True
            data['value_range'] = list(self.value_range)
        return data


@dataclass(frozen=True)
class GradedLabel:
    space: LabelSpace
    label: str

    @property
    def value(self) -> float:
        return float(self.label)


def _discrete(name: str, labels, weights, gains=None) -> LabelSpace:
    return LabelSpace(
        name=name,
        labels=tuple(labels),
        weights=tuple(float(w) for w in weights),
        gains=tuple(float(g) for g in (gains if gains is not None else weights)),
    )


BUILTIN_SPACES = {
    'esci': lambda: _discrete('esci', ['E', 'S', 'C', 'I'], [3, 2, 1, 0]),
    'msmarco-binary': lambda: _discrete('msmarco-binary', ['Relevant', 'Irrelevant'], [1, 0]),
    'wands': lambda: _discrete('wands', ['Exact', 'Partial', 'Irrelevant'], [2, 1, 0]),
    'homedepot-continuous': lambda: LabelSpace(
        name='homedepot-continuous',
        labels=(),
        weights=(),
        gains=(),
        continuous=True,
        value_range=(1.0, 3.0),
    ),
}


def builtin_space(name: str) -> LabelSpace:
    """Return one of the built-in label spaces by name"""
    factory = BUILTIN_SPACES.get(name)
    if factory is None:
        raise ConfigValidationError(
            f"Unknown label space '{name}'. Valid names: {', '.join(sorted(BUILTIN_SPACES))}"
        )
    return factory()


def render_value(value: float) -> str:
    """Shortest exact text for a continuous label, e.g. 2.33 -> '2.33', 3.0 -> '3'"""
    text = repr(float(value))
    return text[:-2] if text.endswith('.0') else text


def parse_label(raw: str, space: LabelSpace) -> GradedLabel:
    """Parse raw dataset label text into a label of the space"""
    text = (raw or '').strip()
    if space.continuous:
        try:
            value = float(text)
        except ValueError:
            raise LabelParseError(raw, space.name)
        low, high = space.value_range
        if not math.isfinite(value) or value < low or value > high:
            raise LabelParseError(raw, space.name)
        return GradedLabel(space, render_value(value))

    folded = text.casefold()
    for label in space.labels:
        if label.casefold() == folded:
            return GradedLabel(space, label)
    raise LabelParseError(raw, space.name)


def gain_of(label: GradedLabel) -> float:
    """NDCG gain of a label: linear by default, 2^g - 1 when the space asks for it"""
    space = label.space
    if space.continuous:
        gain = label.value
    else:
        gain = space.gains[space.rank_of(label.label)]
    if space.exponential_gain:
        return 2.0 ** gain - 1.0
    return gain


def with_gain_overrides(space: LabelSpace, gains: Optional[Dict[str, float]] = None,
                        exponential: Optional[bool] = None) -> LabelSpace:
    """Copy of the space with config-provided gains and/or gain type"""
    updated = space
    if gains:
        if space.continuous:
            raise ConfigValidationError(f"Gain overrides are not supported for continuous space '{space.name}'")
        unknown = [label for label in gains if label not in space.labels]
        if unknown:
            raise ConfigValidationError(f"Gain overrides for unknown labels in '{space.name}': {unknown}")
        merged = tuple(float(gains.get(label, g)) for label, g in zip(space.labels, space.gains))
        updated = replace(updated, gains=merged)
    if exponential is not None:
        updated = replace(updated, exponential_gain=bool(exponential))
    return updated


def label_space_from_dict(data: Dict) -> LabelSpace:
    try:
        name = data['name']
        if data.get('continuous'):
            low, high = data.get('value_range', [1.0, 3.0])
            return LabelSpace(name=name, labels=(), weights=(), gains=(), continuous=True,
                              value_range=(float(low), float(high)),
                              exponential_gain=bool(data.get('exponential_gain', False)))
        labels = list(data['labels'])
        weights = data['weights']
        gains = data.get('gains', weights)
        # maps are accepted as well as lists aligned to the label order
        if isinstance(weights, dict):
            weights = [weights[label] for label in labels]
        if isinstance(gains, dict):
            gains = [gains[label] for label in labels]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigValidationError(f"Invalid label space definition: {e}")
    space = _discrete(name, labels, weights, gains)
    if data.get('exponential_gain'):
        space = replace(space, exponential_gain=True)
    return space


def load_label_space(path) -> LabelSpace:
    """Load a label space from a JSON file of {name, labels, weights, gains}"""
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigValidationError(f"Cannot read label space file {path}: {e}")
    return label_space_from_dict(data)


def resolve_space(value) -> LabelSpace:
    """Accept a built-in name, a path to a JSON file, a dict, or a LabelSpace"""
    if isinstance(value, LabelSpace):
        return value
    if isinstance(value, dict):
        if 'file' in value:
            return load_label_space(value['file'])
        return label_space_from_dict(value)
    if isinstance(value, str) and value in BUILTIN_SPACES:
        return builtin_space(value)
    if isinstance(value, str) and value.endswith('.json'):
        return load_label_space(value)
    return builtin_space(str(value))


def quartile_bucket(value: float, space: LabelSpace) -> str:
    """Bucket a continuous rating into quartiles of the space's value range"""
    low, high = space.value_range
    position = (value - low) / (high - low)
    index = min(3, max(0, int(position * 4)))
    return ['1st Quartile', '2nd Quartile', '3rd Quartile', '4th Quartile'][index]
