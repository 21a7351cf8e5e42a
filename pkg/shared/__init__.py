# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
# Library behind tc_pipeline.py: parsing, encoding, tensor engine, models, training, metrics
