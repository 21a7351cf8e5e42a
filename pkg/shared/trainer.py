# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Two-stage training and the multi-split experiment runner.

Stage 1 trains backbone + Tc head on MSE against Tc (K). Stage 2 freezes both
and trains only the classification head on MSE against the 0/1 label. Each
stage uses lr_initial before decay_epoch and lr_decayed from it on.

run_experiment() repeats this for every split seed and writes:
    <out>/splits/<seed>/checkpoint
    <out>/splits/<seed>/stage1.csv, stage2.csv
    <out>/report.json
    <out>/run_summary.yaml        (not part of the determinism contract)
"""
import asyncio
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from shared.dataset import LabeledRecord, encode_batch, seed_entropy, split, subset, targets
from shared.errors import NumericError
from shared.logger import RunLogger
from shared.metrics import MetricsReport, majority_baseline, metrics_report, summarize_splits
from shared.model import SC_THRESHOLD, ModelConfig, Network, build, save
from shared.tensor_engine import OPTIMIZERS, Node, Tape, backward, make_optimizer, mse_loss

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['epoch', 'train_loss', 'train_metric', 'test_loss', 'test_metric']
TREND_WINDOW = 500
TREND_SMOOTHING = 50
TREND_TOLERANCE = 0.05


class NonFiniteLoss(NumericError):
    category = 'nonfinite_loss'

    def __init__(self, stage: int, epoch: int, batch: Sequence[int]):
        super().__init__(f"Non-finite loss in stage {stage} at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
        self.batch = list(batch)


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 5000
    stage2_epochs: int = 5000
    lr_initial: float = 1e-4
    lr_decayed: float = 1e-5
    decay_epoch: int = 3000
    batch_size: Optional[int] = None
    splits: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    optimizer: str = 'adam'
    test_fraction: float = 0.2
    eval_every: int = 1
    log_every: int = 500

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("Each stage needs at least one epoch")
        if not 0 < self.decay_epoch < min(self.stage1_epochs, self.stage2_epochs):
            raise ValueError(f"decay_epoch {self.decay_epoch} must fall inside both stages "
                             f"({self.stage1_epochs}, {self.stage2_epochs} epochs)")
        if not (self.lr_initial > 0 and self.lr_decayed > 0):
            raise ValueError("Learning rates must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not self.splits:
            raise ValueError("At least one split seed is required")
        if self.eval_every < 1 or self.log_every < 1:
            raise ValueError("eval_every and log_every must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")

    def lr_at(self, epoch: int) -> float:
        """Effective rate for a 0-indexed epoch within either stage"""
        return self.lr_initial if epoch < self.decay_epoch else self.lr_decayed

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['splits'] = list(self.splits)
        return data


@dataclass
class EpochLog:
    stage: int
    epoch: int
    lr: float
    train_loss: float
    train_metric: float       # MAE (K) in stage 1, accuracy in stage 2
    test_loss: Optional[float] = None
    test_metric: Optional[float] = None


@dataclass
class SplitResult:
    seed: int
    n_train: int
    n_test: int
    train: MetricsReport
    test: Optional[MetricsReport]
    curves: Dict[int, List[EpochLog]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {'seed': self.seed, 'n_train': self.n_train, 'n_test': self.n_test,
                'train': self.train.to_dict(),
                'test': self.test.to_dict() if self.test is not None else None}


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: Optional[int], rng: np.random.Generator) -> List[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value: float, stage: int, epoch: int, lr: float, batch: np.ndarray,
                  records: Sequence[LabeledRecord], run_logger: Optional[RunLogger]) -> None:
    if math.isfinite(value):
        return
    logger.error(f"Stage {stage}: non-finite loss {value} at epoch {epoch}")
    if run_logger is not None:
        run_logger.log_nonfinite(stage, epoch, {
            'lr': lr,
            'loss': repr(value),
            'batch_indices': [int(i) for i in batch],
            'formulas': [records[i].formula for i in batch],
            'tc': [records[i].tc for i in batch],
        })
    raise NonFiniteLoss(stage, epoch, batch)


def _warn_on_rising_tail(stage: int, curve: List[EpochLog]) -> None:
    """Soft check: smoothed train loss over the last epochs should not rise > 5%."""
    losses = np.array([e.train_loss for e in curve[-TREND_WINDOW:]])
    if len(curve) < TREND_WINDOW or len(losses) < TREND_SMOOTHING:
        return
    smoothed = np.convolve(losses, np.ones(TREND_SMOOTHING) / TREND_SMOOTHING, mode='valid')
    running_min = np.minimum.accumulate(smoothed)
    if np.any(smoothed > running_min * (1 + TREND_TOLERANCE)):
        logger.warning(f"Stage {stage}: smoothed train loss rose more than "
                       f"{TREND_TOLERANCE:.0%} over the final {TREND_WINDOW} epochs")


def _mae(tc_raw: np.ndarray, tc_true: np.ndarray) -> float:
    return float(np.mean(np.abs(np.maximum(tc_raw, 0.0) - tc_true)))


def train_stage1(network: Network, train: Sequence[LabeledRecord], schedule: TrainSchedule,
                 test: Optional[Sequence[LabeledRecord]] = None,
                 run_logger: Optional[RunLogger] = None) -> List[EpochLog]:
    """Jointly fit backbone + Tc head on Tc MSE; the classification head is untouched."""
    store = network.params
    store.set_trainable(('backbone', 'tc_head'), True)
    store.set_trainable(('cls_head',), False)
    store.zero_grad()
    optimizer = make_optimizer(schedule.optimizer)
    rng = np.random.default_rng(seed_entropy(network.config.seed, 1))

    x = encode_batch([r.composition for r in train], network.config.variant)
    y, _ = targets(train)
    if test:
        x_test = encode_batch([r.composition for r in test], network.config.variant)
        y_test, _ = targets(test)

    logger.info(f"Stage 1: {len(train)} records, {schedule.stage1_epochs} epochs")
    curve: List[EpochLog] = []
    for epoch in range(schedule.stage1_epochs):
        lr = schedule.lr_at(epoch)
        loss_sum = abs_sum = 0.0
        for batch in _batches(len(train), schedule.batch_size, rng):
            tape = Tape()
            tc = network.head(network.backbone(tape.constant(x[batch]), tape), 'tc_head', tape)
            loss = mse_loss(tc, y[batch])
            value = float(loss.value)
            _check_finite(value, 1, epoch, lr, batch, train, run_logger)
            backward(tape, loss)
            optimizer.step(store, lr)
            loss_sum += value * len(batch)
            abs_sum += float(np.sum(np.abs(np.maximum(tc.value, 0.0) - y[batch])))
        entry = EpochLog(1, epoch, lr, loss_sum / len(train), abs_sum / len(train))

        if test and (epoch % schedule.eval_every == 0 or epoch == schedule.stage1_epochs - 1):
            tc_test, _ = network.outputs(x_test)
            entry.test_loss = float(np.mean((tc_test - y_test[:, 0]) ** 2))
            entry.test_metric = _mae(tc_test, y_test[:, 0])
        curve.append(entry)
        if epoch % schedule.log_every == 0:
            logger.info(f"Stage 1 epoch {epoch}: lr={lr:g} loss={entry.train_loss:.4f} "
                        f"mae={entry.train_metric:.3f} K")

    _warn_on_rising_tail(1, curve)
    return curve


def train_stage2(network: Network, train: Sequence[LabeledRecord], schedule: TrainSchedule,
                 test: Optional[Sequence[LabeledRecord]] = None,
                 run_logger: Optional[RunLogger] = None) -> List[EpochLog]:
    """Fit only the classification head on label MSE over frozen backbone features."""
    store = network.params
    store.set_trainable(('backbone', 'tc_head'), False)
    store.set_trainable(('cls_head',), True)
    store.zero_grad()
    optimizer = make_optimizer(schedule.optimizer)
    rng = np.random.default_rng(seed_entropy(network.config.seed, 2))

    # The backbone is frozen for the whole stage, so its features are fixed.
    x = encode_batch([r.composition for r in train], network.config.variant)
    features = network.features(x)
    _, labels = targets(train)
    if test:
        x_test = encode_batch([r.composition for r in test], network.config.variant)
        features_test = network.features(x_test)
        _, labels_test = targets(test)

    logger.info(f"Stage 2: {len(train)} records, {schedule.stage2_epochs} epochs")
    curve: List[EpochLog] = []
    for epoch in range(schedule.stage2_epochs):
        lr = schedule.lr_at(epoch)
        loss_sum = 0.0
        correct = 0
        for batch in _batches(len(train), schedule.batch_size, rng):
            tape = Tape()
            score = network.head(tape.constant(features[batch]), 'cls_head', tape)
            loss = mse_loss(score, labels[batch])
            value = float(loss.value)
            _check_finite(value, 2, epoch, lr, batch, train, run_logger)
            backward(tape, loss)
            optimizer.step(store, lr)
            loss_sum += value * len(batch)
            correct += int(np.sum((score.value >= SC_THRESHOLD) == (labels[batch] == 1)))
        entry = EpochLog(2, epoch, lr, loss_sum / len(train), correct / len(train))

        if test and (epoch % schedule.eval_every == 0 or epoch == schedule.stage2_epochs - 1):
            score_test = network.head(Node(features_test), 'cls_head').value
            entry.test_loss = float(np.mean((score_test - labels_test) ** 2))
            entry.test_metric = float(np.mean((score_test >= SC_THRESHOLD) == (labels_test == 1)))
        curve.append(entry)
        if epoch % schedule.log_every == 0:
            logger.info(f"Stage 2 epoch {epoch}: lr={lr:g} loss={entry.train_loss:.4f} "
                        f"accuracy={entry.train_metric:.4f}")

    _warn_on_rising_tail(2, curve)
    return curve


# ---------------------------------------------------------------------------
# Evaluation / experiment
# ---------------------------------------------------------------------------

def evaluate(network: Network, records: Sequence[LabeledRecord]) -> MetricsReport:
    x = encode_batch([r.composition for r in records], network.config.variant)
    tc_raw, score = network.outputs(x)
    tc_true, labels = targets(records)
    return metrics_report(np.maximum(tc_raw, 0.0), (score >= SC_THRESHOLD).astype(int),
                          tc_true[:, 0], labels[:, 0].astype(int))


def write_curve(path: Path, curve: List[EpochLog]) -> None:
    frame = pd.DataFrame([dataclasses.asdict(e) for e in curve], columns=['stage', 'lr', *CURVE_COLUMNS])
    frame[CURVE_COLUMNS].to_csv(path, index=False, lineterminator='\n')


def split_model_seed(model_seed: int, split_seed: int) -> int:
    return int(np.random.SeedSequence(seed_entropy(model_seed, split_seed)).generate_state(1)[0])


def run_split(records: Sequence[LabeledRecord], model_config: ModelConfig, schedule: TrainSchedule,
              seed: int, out_dir: Path, run_logger: Optional[RunLogger] = None) -> SplitResult:
    split_set = split(records, seed, schedule.test_fraction)
    train, test = subset(records, split_set.train_indices), subset(records, split_set.test_indices)
    logger.info(f"Split {seed}: {len(train)} train / {len(test)} test")

    network = build(dataclasses.replace(model_config, seed=split_model_seed(model_config.seed, seed)))
    curve1 = train_stage1(network, train, schedule, test, run_logger)
    curve2 = train_stage2(network, train, schedule, test, run_logger)

    split_dir = out_dir / 'splits' / str(seed)
    split_dir.mkdir(parents=True, exist_ok=True)
    save(network, split_dir / 'checkpoint')
    write_curve(split_dir / 'stage1.csv', curve1)
    write_curve(split_dir / 'stage2.csv', curve2)

    return SplitResult(seed, len(train), len(test), evaluate(network, train),
                       evaluate(network, test) if test else None, {1: curve1, 2: curve2})


async def _run_splits_parallel(records, model_config, schedule, out_dir, jobs, run_logger) -> list:
    semaphore = asyncio.Semaphore(jobs)

    async def run_with_semaphore(seed: int):
        async with semaphore:
            return await asyncio.to_thread(run_split, records, model_config, schedule, seed,
                                           out_dir, run_logger)

    tasks = [run_with_semaphore(seed) for seed in schedule.splits]
    return await asyncio.gather(*tasks, return_exceptions=True)


def build_report(records: Sequence[LabeledRecord], model_config: ModelConfig, schedule: TrainSchedule,
                 results: List[SplitResult], failures: List[Dict[str, Any]]) -> Dict[str, Any]:
    report: Dict[str, Any] = {
        'model': model_config.to_dict(),
        'schedule': schedule.to_dict(),
        'n_records': len(records),
        'baseline': majority_baseline([r.label for r in records]).to_dict(),
        'splits': [r.to_dict() for r in results],
        'aggregate': {},
        'failed_splits': failures,
    }
    if results:
        report['aggregate']['train'] = summarize_splits([r.train for r in results])
        tested = [r.test for r in results if r.test is not None]
        if tested:
            report['aggregate']['test'] = summarize_splits(tested)
    return report


def run_experiment(records: Sequence[LabeledRecord], model_config: ModelConfig, schedule: TrainSchedule,
                   out_dir: Path, jobs: int = 1) -> Dict[str, Any]:
    """Train and evaluate one replica per split seed; returns the report dict.

    report.json is written even if a split fails; the first failure is then re-raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_logger = RunLogger(out_dir)
    start_time = datetime.now()

    outcomes = asyncio.run(_run_splits_parallel(records, model_config, schedule, out_dir,
                                                max(1, jobs), run_logger))

    results, failures, first_error = [], [], None
    for seed, outcome in zip(schedule.splits, outcomes):
        if isinstance(outcome, Exception):
            logger.error(f"Split {seed} failed: {outcome}")
            failures.append({'seed': seed, 'category': getattr(outcome, 'category', type(outcome).__name__),
                             'error': str(outcome)})
            first_error = first_error or outcome
        else:
            results.append(outcome)

    report = build_report(records, model_config, schedule, results, failures)
    (out_dir / 'report.json').write_text(json.dumps(report, indent=1) + '\n', encoding='utf-8')
    logger.info(f"Wrote {out_dir / 'report.json'}")

    end_time = datetime.now()
    run_logger.log_run_summary({
        'timestamp': end_time.isoformat(),
        'processing_time_seconds': (end_time - start_time).total_seconds(),
        'variant': model_config.variant,
        'records': len(records),
        'splits_completed': [r.seed for r in results],
        'failed_splits': failures,
        'formatted': {part: summary['formatted'] for part, summary in report['aggregate'].items()},
        'configuration': {'model': model_config.to_dict(), 'schedule': schedule.to_dict(), 'jobs': jobs},
    })

    if first_error is not None:
        raise first_error
    return report
