# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""YAML run logs: experiment summaries and non-finite-loss diagnostics"""

import logging
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict

import yaml

logger = logging.getLogger(__name__)


class _LogDumper(yaml.SafeDumper):
    pass


def _str_representer(dumper, data):
    # Multiline strings (tracebacks, long formulas lists) in pipe notation
    if '\n' in data or len(data) > 80:
        return dumper.represent_scalar('tag:yaml.org,2002:str', data, style='|')
    return dumper.represent_scalar('tag:yaml.org,2002:str', data)


_LogDumper.add_representer(str, _str_representer)


class RunLogger:
    """Writes human-readable YAML next to the machine outputs of a run"""

    def __init__(self, run_dir: Path):
        """Initialize logger with the run's output directory"""
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.diagnostics_dir = self.run_dir / 'diagnostics'
        self._lock = threading.Lock()

    def _dump(self, data: Dict[str, Any], path: Path) -> None:
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                yaml.dump(data, f, Dumper=_LogDumper, default_flow_style=False, allow_unicode=True,
                          sort_keys=False, indent=2)

    def log_run_summary(self, stats: Dict[str, Any]) -> Path:
        """Experiment summary (timings, completed/failed splits, configuration)"""
        log_path = self.run_dir / 'run_summary.yaml'
        self._dump(stats, log_path)
        logger.info(f"Logged run summary to {log_path}")
        return log_path

    def log_nonfinite(self, stage: int, epoch: int, details: Dict[str, Any]) -> Path:
        """Dump the batch that produced a non-finite loss"""
        timestamp = datetime.now().strftime('%Y%m%d_%H%M%S_%f')
        log_path = self.diagnostics_dir / f"nonfinite_stage{stage}_epoch{epoch}_{timestamp}.yaml"
        entry = {'timestamp': datetime.now().isoformat(), 'stage': stage, 'epoch': epoch, **details}
        self._dump(entry, log_path)
        logger.error(f"Non-finite loss diagnostics written to {log_path}")
        return log_path
