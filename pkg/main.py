#!/usr/bin/env python3
"""
🚀 FEATURIZED QUERY R-CNN - LAUNCHER
====================================

Entry point for every subcommand (see `python main.py --help`).

Numeric libraries are pinned to one thread before numpy loads so that
latency numbers are comparable across components.
"""

import os
import sys

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
