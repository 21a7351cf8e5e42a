# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Branched networks: a shared backbone feeding a Tc regression head and a
superconductor classification head.

    fcnn: 120 -> dense stack (ReLU)                              -> heads
    cnn:  1x10x12 -> [conv -> ReLU -> optional max-pool]* -> flatten -> dense (ReLU) -> heads
    head: hidden dense (ReLU)* -> 1   (classification head ends in a sigmoid)

Parameters are tagged backbone / tc_head / cls_head so training can freeze
whole groups.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.checkpoint import ConfigConflict, read_checkpoint, write_checkpoint
from shared.dataset import GRID_SHAPE, VECTOR_LENGTH, LabeledRecord, encode_batch, seed_entropy
from shared.errors import InvalidConfig
from shared.formula_parser import Composition
from shared.tensor_engine import (InvalidGeometry, Node, ParamStore, ShapeMismatch, Tape,
                                  affine, conv2d, conv_output_extent, flatten, maxpool2d,
                                  relu, sigmoid)

logger = logging.getLogger(__name__)

VARIANTS = ('fcnn', 'cnn')
SC_THRESHOLD = 0.5
PREDICT_CHUNK = 4096


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pool: Optional[int] = None


@dataclass(frozen=True)
class ModelConfig:
    variant: str = 'fcnn'
    backbone: Tuple[int, ...] = (256, 128)
    conv: Tuple[ConvSpec, ...] = (ConvSpec(16, 3, 1, 1, 2), ConvSpec(32, 3, 1, 1, None))
    dense: Tuple[int, ...] = (128,)
    head: Tuple[int, ...] = (64,)
    seed: int = 0
    zero_init_output: bool = True

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['backbone'] = list(self.backbone)
        data['dense'] = list(self.dense)
        data['head'] = list(self.head)
        data['conv'] = [dataclasses.asdict(c) for c in self.conv]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        try:
            return cls(
                variant=str(data.get('variant', 'fcnn')),
                backbone=tuple(int(w) for w in data.get('backbone', cls.backbone)),
                conv=tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c)
                           for c in data.get('conv', cls.conv)),
                dense=tuple(int(w) for w in data.get('dense', cls.dense)),
                head=tuple(int(w) for w in data.get('head', cls.head)),
                seed=int(data.get('seed', 0)),
                zero_init_output=bool(data.get('zero_init_output', True)),
            )
        except (TypeError, ValueError) as e:
            raise InvalidConfig(f"model section: {e}") from e


@dataclass(frozen=True)
class Prediction:
    tc_pred: float
    sc_score: float

    @property
    def sc_label(self) -> int:
        return 1 if self.sc_score >= SC_THRESHOLD else 0


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Network:
    """Parameter store plus the forward function for one ModelConfig"""

    def __init__(self, config: ModelConfig, params: ParamStore, conv_plan: List[Tuple[str, ConvSpec]],
                 dense_names: List[str], head_names: Dict[str, List[str]]):
        self.config = config
        self.params = params
        self._conv_plan = conv_plan
        self._dense_names = dense_names
        self._head_names = head_names

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (1, *GRID_SHAPE) if self.config.variant == 'cnn' else (VECTOR_LENGTH,)

    def _p(self, name: str, tape: Optional[Tape]) -> Node:
        param = self.params[name]
        return tape.param(param) if tape is not None else Node(param.value)

    def _dense(self, h: Node, prefix: str, tape: Optional[Tape]) -> Node:
        return affine(h, self._p(f"{prefix}.w", tape), self._p(f"{prefix}.b", tape))

    def backbone(self, x: Node, tape: Optional[Tape] = None) -> Node:
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"{self.config.variant} input", ('N', *self.input_shape), x.shape)
        h = x
        for prefix, spec in self._conv_plan:
            h = relu(conv2d(h, self._p(f"{prefix}.k", tape), self._p(f"{prefix}.b", tape),
                            stride=spec.stride, padding=spec.padding))
            if spec.pool:
                h = maxpool2d(h, spec.pool)
        if self._conv_plan:
            h = flatten(h)
        for prefix in self._dense_names:
            h = relu(self._dense(h, prefix, tape))
        return h

    def head(self, features: Node, which: str, tape: Optional[Tape] = None) -> Node:
        """Raw Tc for which='tc_head', sigmoid score for which='cls_head'"""
        names = self._head_names[which]
        h = features
        for prefix in names[:-1]:
            h = relu(self._dense(h, prefix, tape))
        out = self._dense(h, names[-1], tape)
        return sigmoid(out) if which == 'cls_head' else out

    def forward(self, x, tape: Optional[Tape] = None) -> Tuple[Node, Node]:
        """(raw Tc, classification score), each N x 1"""
        if not isinstance(x, Node):
            x = tape.constant(x) if tape is not None else Node(np.asarray(x, dtype=np.float64))
        features = self.backbone(x, tape)
        return self.head(features, 'tc_head', tape), self.head(features, 'cls_head', tape)

    def features(self, inputs: np.ndarray) -> np.ndarray:
        """Untaped backbone output over a batch, chunked like outputs()"""
        if len(inputs) <= PREDICT_CHUNK:
            return self.backbone(Node(inputs)).value
        return np.concatenate([self.backbone(Node(inputs[start:start + PREDICT_CHUNK])).value
                               for start in range(0, len(inputs), PREDICT_CHUNK)])

    def outputs(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Untaped forward over a batch, chunked; returns flat (raw Tc, score)."""
        tc_parts, score_parts = [], []
        for start in range(0, len(inputs), PREDICT_CHUNK):
            tc, score = self.forward(inputs[start:start + PREDICT_CHUNK])
            tc_parts.append(tc.value[:, 0])
            score_parts.append(score.value[:, 0])
        if not tc_parts:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(tc_parts), np.concatenate(score_parts)


def build(config: ModelConfig) -> Network:
    """Allocate and initialise parameters for `config`.

    Kaiming-uniform (fan-in) weights, zero biases; with zero_init_output the last
    layer of each head starts at zero.
    """
    if config.variant not in VARIANTS:
        raise InvalidConfig(f"variant must be one of {VARIANTS}, got {config.variant!r}")
    widths = list(config.backbone if config.variant == 'fcnn' else config.dense) + list(config.head)
    if any(w < 1 for w in widths):
        raise InvalidConfig(f"layer widths must be positive, got {widths}")

    rng = np.random.default_rng(seed_entropy(config.seed))
    store = ParamStore()
    conv_plan: List[Tuple[str, ConvSpec]] = []
    dense_names: List[str] = []

    if config.variant == 'cnn':
        if not config.conv:
            raise InvalidConfig("cnn needs at least one conv layer")
        channels, (h, w) = 1, GRID_SHAPE
        for i, spec in enumerate(config.conv):
            if spec.filters < 1 or spec.kernel < 1:
                raise InvalidConfig(f"conv layer {i}: filters and kernel must be positive")
            try:
                h = conv_output_extent(h, spec.kernel, spec.stride, spec.padding)
                w = conv_output_extent(w, spec.kernel, spec.stride, spec.padding)
            except InvalidGeometry as e:
                raise InvalidConfig(f"conv layer {i}: {e}") from e
            if spec.pool:
                if spec.pool > min(h, w) or h % spec.pool or w % spec.pool:
                    raise InvalidConfig(f"conv layer {i}: pool {spec.pool} does not tile a {h}x{w} map")
                h, w = h // spec.pool, w // spec.pool
            prefix = f"backbone.conv{i}"
            fan_in = channels * spec.kernel * spec.kernel
            store.add(f"{prefix}.k", kaiming_uniform(rng, (spec.filters, channels, spec.kernel, spec.kernel), fan_in),
                      'backbone')
            store.add(f"{prefix}.b", np.zeros(spec.filters), 'backbone')
            conv_plan.append((prefix, spec))
            channels = spec.filters
        fan_in = channels * h * w
        hidden = config.dense
    else:
        fan_in = VECTOR_LENGTH
        hidden = config.backbone

    for i, width in enumerate(hidden):
        prefix = f"backbone.dense{i}"
        store.add(f"{prefix}.w", kaiming_uniform(rng, (fan_in, width), fan_in), 'backbone')
        store.add(f"{prefix}.b", np.zeros(width), 'backbone')
        dense_names.append(prefix)
        fan_in = width
    features = fan_in

    head_names: Dict[str, List[str]] = {}
    for group in ('tc_head', 'cls_head'):
        names = []
        fan_in = features
        for i, width in enumerate(config.head):
            prefix = f"{group}.dense{i}"
            store.add(f"{prefix}.w", kaiming_uniform(rng, (fan_in, width), fan_in), group)
            store.add(f"{prefix}.b", np.zeros(width), group)
            names.append(prefix)
            fan_in = width
        prefix = f"{group}.out"
        weight = np.zeros((fan_in, 1)) if config.zero_init_output \
            else kaiming_uniform(rng, (fan_in, 1), fan_in)
        store.add(f"{prefix}.w", weight, group)
        store.add(f"{prefix}.b", np.zeros(1), group)
        names.append(prefix)
        head_names[group] = names

    logger.debug(f"Built {config.variant} with {store.size()} parameters")
    return Network(config, store, conv_plan, dense_names, head_names)


def predict(network: Network, items: Sequence[Union[Composition, LabeledRecord]]) -> List[Prediction]:
    """Batched forward; negative raw Tc is reported as 0 K."""
    compositions = [i.composition if isinstance(i, LabeledRecord) else i for i in items]
    inputs = encode_batch(compositions, network.config.variant)
    tc, score = network.outputs(inputs)
    return [Prediction(float(max(t, 0.0)), float(s)) for t, s in zip(tc, score)]


def save(network: Network, path: Path) -> None:
    write_checkpoint(path, network.config.to_dict(), network.params)


def load(path: Path, variant: Optional[str] = None) -> Network:
    """Rebuild the network from the stored config and copy stored values in.

    `variant` asserts what the caller expects; a mismatch is a ConfigConflict.
    """
    config_dict, stored = read_checkpoint(path)
    config = ModelConfig.from_dict(config_dict)
    if variant is not None and config.variant != variant:
        raise ConfigConflict(f"Checkpoint {path} holds a {config.variant} model, expected {variant}")
    network = build(config)
    if network.params.names() != stored.names():
        raise ConfigConflict(f"Checkpoint {path} parameters do not match its own config")
    for param in network.params:
        source = stored[param.name]
        if source.value.shape != param.value.shape or source.group != param.group:
            raise ConfigConflict(f"Checkpoint {path}: parameter {param.name} does not match its config")
        param.value[...] = source.value
    return network
