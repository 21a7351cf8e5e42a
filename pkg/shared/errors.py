# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Error hierarchy shared by the library and the CLI.

Every error the CLI reports carries a snake_case `category` (printed on its own
stderr line so scripts can match it) and the process exit code to use:
    0 success, 1 usage, 2 data error, 3 numeric failure
"""

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class PipelineError(Exception):
    """Base class for errors surfaced to the operator"""

    category = 'pipeline_error'
    exit_code = EXIT_DATA


class DataError(PipelineError, ValueError):
    """Bad input: formulas, CSV rows, checkpoints, configuration"""

    category = 'data_error'
    exit_code = EXIT_DATA


class NumericError(PipelineError, ArithmeticError):
    """Training or verification produced numbers we refuse to continue with"""

    category = 'numeric_failure'
    exit_code = EXIT_NUMERIC


class InvalidConfig(DataError):
    category = 'invalid_config'

    def __init__(self, reason: str):
        super().__init__(f"Invalid configuration: {reason}")
        self.reason = reason
