#!/usr/bin/env python3
"""
CAPS command-line entry point.

This is a thin wrapper that delegates to the caps_preset package.
For the full implementation, see src/caps_preset/main.py.

Usage:
    python caps.py analyze input.y4m
    python caps.py --mock dataset synthetic:20 -o data/dataset.csv
    python caps.py train data/dataset.csv -o data/models.json
    python caps.py --mock encode-ladder synthetic:20 --models data/models.json

Environment variables:
    CAPS_CONFIG: Path to config file (optional, defaults to ./caps_config.json)
"""

import os
import sys

# Add src to path for development (before package is installed)
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

from caps_preset.main import main

if __name__ == "__main__":
    sys.exit(main())
