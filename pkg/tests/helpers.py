"""Synthetic records and tiny configurations shared by the test modules"""
from pathlib import Path

import numpy as np

from shared.dataset import LabeledRecord
from shared.formula_parser import Composition, Element
from shared.model import ConvSpec, ModelConfig
from shared.trainer import TrainSchedule

REPO = Path(__file__).parent.parent
DATA_DIR = Path(__file__).parent / "data"

POOL = ["Cu", "O", "Ba", "La", "Fe", "As", "Nb", "Sn", "Mo", "Re", "Si", "Ge", "Mg", "B",
        "Y", "Sr", "Ti", "Se", "Bi", "Pb"]

TINY_FCNN = ModelConfig(variant="fcnn", backbone=(16, 8), head=(4,))
TINY_CNN = ModelConfig(variant="cnn", conv=(ConvSpec(2, 3, 1, 1, 2),), dense=(8,), head=(4,))


def make_records(n, seed=0, superconducting=0.7):
    """n distinct 3-element compositions; Tc in [0.5, 1] K or exactly 0"""
    rng = np.random.default_rng(seed)
    records, seen = [], set()
    while len(records) < n:
        symbols = rng.choice(POOL, size=3, replace=False)
        amounts = rng.integers(1, 8, size=3)
        comp = Composition([(Element.from_symbol(s), float(a)) for s, a in zip(symbols, amounts)])
        if comp in seen:
            continue
        seen.add(comp)
        tc = float(rng.uniform(0.5, 1.0)) if rng.uniform() < superconducting else 0.0
        formula = "".join(f"{s}{a}" for s, a in zip(symbols, amounts))
        records.append(LabeledRecord(comp, tc, formula))
    return records


def write_records(path, records):
    lines = ["formula,tc"] + [f"{r.formula},{r.tc!r}" for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def short_schedule(epochs=50, decay=30, **kwargs):
    return TrainSchedule(stage1_epochs=epochs, stage2_epochs=epochs, decay_epoch=decay,
                         log_every=10, **kwargs)
