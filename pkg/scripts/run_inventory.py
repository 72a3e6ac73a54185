#!/usr/bin/env python3
"""Run the inventory benchmark with the packaged desk-scale config.

Extra arguments are forwarded to `taskqp run` (e.g. --out, --jobs).
"""
import sys
from pathlib import Path

from taskqp.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "inventory.yaml"

if __name__ == "__main__":
    sys.exit(main(["run", str(CONFIG), *sys.argv[1:]]))
