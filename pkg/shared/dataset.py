# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Labeled composition records: CSV ingestion, encoding, splits, statistics.

Encoding: a length-120 vector whose index Z-1 holds the element's share of
the total stoichiometric amount (so Mo4Re2Si and Mo20Re10Si5 encode the same).
Indices 118 and 119 are never populated. The CNN input is the same vector
reshaped row-major into a 10x12 grid.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from shared.errors import DataError
from shared.formula_parser import Composition, FormulaError, parse_formula

logger = logging.getLogger(__name__)

VECTOR_LENGTH = 120
GRID_SHAPE = (10, 12)
CSV_COLUMNS = ['formula', 'tc']
# pandas tokenizer errors name the physical line, e.g. "Expected 2 fields in line 4, saw 3"
_TOKENIZER_LINE = re.compile(r'in line (\d+)')
# n * f can land a hair below an integer in floating point
SPLIT_EPSILON = 1e-9


class DatasetIOError(DataError):
    category = 'io'

    def __init__(self, path: Path, cause: Exception):
        super().__init__(f"Cannot read {path}: {cause}")
        self.path = path


class ParseRow(DataError):
    category = 'parse_row'

    def __init__(self, line: int, cause: str):
        super().__init__(f"Line {line}: {cause}")
        self.line = line
        self.cause = cause


class NegativeTc(DataError):
    category = 'negative_tc'

    def __init__(self, line: int, tc: float):
        super().__init__(f"Line {line}: negative Tc {tc}")
        self.line = line


class EmptyDataset(DataError):
    category = 'empty_dataset'

    def __init__(self, message: str = "Dataset has no records"):
        super().__init__(message)


@dataclass(frozen=True)
class LabeledRecord:
    composition: Composition
    tc: float
    formula: str = ''

    @property
    def label(self) -> int:
        """1 = superconductor (Tc > 0), 0 otherwise"""
        return 1 if self.tc > 0 else 0


@dataclass(frozen=True)
class SplitSet:
    seed: int
    train_indices: List[int] = field(default_factory=list)
    test_indices: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'seed': self.seed, 'train': list(self.train_indices), 'test': list(self.test_indices)}


@dataclass(frozen=True)
class TcHistogram:
    bins: List[Tuple[float, int]]
    mean_tc: float
    bin_width: float

    def to_tsv(self) -> str:
        lines = ['bin_lower\tcount']
        lines += [f"{lower:g}\t{count}" for lower, count in self.bins]
        lines.append(f"# mean={self.mean_tc:.6g}")
        return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def load_csv(path: Path) -> List[LabeledRecord]:
    """Read a `formula,tc` CSV (header required) into labeled records.

    Rows are 1-based file lines in error messages, the header being line 1.
    Blank lines are skipped but still counted. An entirely empty file yields
    no records.
    """
    path = Path(path)
    try:
        # blank lines stay in the frame so row i is file line i + 2
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True,
                            skip_blank_lines=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        logger.warning(f"{path} is empty")
        return []
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetIOError(path, e) from e
    except pd.errors.ParserError as e:
        match = _TOKENIZER_LINE.search(str(e))
        raise ParseRow(int(match.group(1)) if match else 1, f"unreadable CSV: {e}") from e

    columns = [str(c).strip().lower() for c in frame.columns]
    if columns != CSV_COLUMNS:
        raise ParseRow(1, f"expected header 'formula,tc', got {','.join(map(str, frame.columns))!r}")

    records = []
    for idx, (formula, tc_text) in enumerate(zip(frame.iloc[:, 0], frame.iloc[:, 1])):
        line = idx + 2
        formula = '' if pd.isna(formula) else str(formula).strip()
        tc_text = '' if pd.isna(tc_text) else str(tc_text).strip()
        if not formula and not tc_text:
            continue
        try:
            composition = parse_formula(formula)
        except FormulaError as e:
            raise ParseRow(line, f"formula {formula!r}: {e}") from e
        try:
            tc = float(tc_text)
        except ValueError:
            raise ParseRow(line, f"Tc {tc_text!r} is not a number")
        if not math.isfinite(tc):
            raise ParseRow(line, f"Tc {tc_text!r} is not finite")
        if tc < 0:
            raise NegativeTc(line, tc)
        records.append(LabeledRecord(composition, tc, formula))

    logger.info(f"Loaded {len(records)} records from {path} "
                f"({sum(r.label for r in records)} superconductors)")
    return records


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def encode_vector(composition: Composition) -> np.ndarray:
    """Fractions of the total amount at index atomic_number - 1."""
    values = np.zeros(VECTOR_LENGTH, dtype=np.float64)
    total = composition.total
    for element, amount in composition.entries:
        values[element.atomic_number - 1] = amount / total
    return values


def encode_grid(vector: np.ndarray) -> np.ndarray:
    """Row-major 10x12 reshape: grid[r, c] = vector[12 * r + c]"""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (VECTOR_LENGTH,):
        raise ValueError(f"Expected a vector of length {VECTOR_LENGTH}, got shape {vector.shape}")
    return vector.reshape(GRID_SHAPE).copy()


def encode_batch(compositions: Sequence[Composition], variant: str) -> np.ndarray:
    """Network input batch: N x 120 for fcnn, N x 1 x 10 x 12 for cnn."""
    vectors = np.stack([encode_vector(c) for c in compositions]) if compositions \
        else np.zeros((0, VECTOR_LENGTH))
    if variant == 'cnn':
        return vectors.reshape(len(vectors), 1, *GRID_SHAPE)
    return vectors


def targets(records: Sequence[LabeledRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """(tc, label) column vectors of shape N x 1"""
    tc = np.array([r.tc for r in records], dtype=np.float64).reshape(-1, 1)
    labels = np.array([r.label for r in records], dtype=np.float64).reshape(-1, 1)
    return tc, labels


# ---------------------------------------------------------------------------
# Splits and statistics
# ---------------------------------------------------------------------------

def seed_entropy(*seeds: int) -> List[int]:
    """numpy SeedSequence entropy for integer seeds of any sign and size.

    Non-negative seeds pass through unchanged; otherwise the magnitudes are
    followed by a bitmask of the negative positions.
    """
    words = [abs(int(s)) for s in seeds]
    negative = sum(1 << i for i, s in enumerate(seeds) if s < 0)
    return words + [negative] if negative else words


def _split_state(seed: int) -> int:
    """sklearn random_state, which must lie in [0, 2**32)"""
    if 0 <= seed < 2 ** 32:
        return int(seed)
    return int(np.random.SeedSequence(seed_entropy(seed)).generate_state(1)[0])


def split(records: Sequence, seed: int, test_fraction: float = 0.2) -> SplitSet:
    """Seeded shuffle into train/test; the test side gets floor(n * f) records.

    16414 records at f=0.2 give 13132 train / 3282 test.
    """
    n = len(records)
    if n == 0:
        raise EmptyDataset("Cannot split an empty dataset")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")

    n_test = int(math.floor(n * test_fraction + SPLIT_EPSILON))
    indices = np.arange(n)
    if n_test == 0:
        return SplitSet(seed, indices.tolist(), [])
    train_idx, test_idx = train_test_split(indices, test_size=n_test, random_state=_split_state(seed),
                                         shuffle=True)
    logger.debug(f"Split seed={seed}: {len(train_idx)} train / {len(test_idx)} test")
    return SplitSet(seed, [int(i) for i in train_idx], [int(i) for i in test_idx])


def tc_histogram(records: Sequence[LabeledRecord], bin_width: float) -> TcHistogram:
    """Counts over [k*w, (k+1)*w), empty bins omitted, plus the mean Tc."""
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    tc = np.array([r.tc for r in records], dtype=np.float64)
    if tc.size == 0:
        return TcHistogram([], float('nan'), bin_width)
    bin_index = np.floor(tc / bin_width).astype(np.int64)
    keys, counts = np.unique(bin_index, return_counts=True)
    bins = [(float(k * bin_width), int(c)) for k, c in zip(keys, counts)]
    return TcHistogram(bins, float(tc.mean()), bin_width)


def subset(records: Sequence[LabeledRecord], indices: Optional[Sequence[int]]) -> List[LabeledRecord]:
    return [records[i] for i in indices] if indices is not None else list(records)
