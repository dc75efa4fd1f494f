#!/usr/bin/env python
"""
Mastosim - Entry Point

Run the builtin malicious-partisan experiment with the scripted backend:
    python run.py run --variant malicious --rules rules/storhampton_demo.yaml --out runs/demo

Other commands: resume, export, validate, graph-stats (see --help).
"""

import sys

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
