"""
Uncertainty-Aware Fault Diagnosis Engine
==========================================
Command-line entry point. Each command is one step of the pipeline and
reads what the previous steps wrote under the output directory.

Usage:
    python3 main.py simulate --config experiments/two_tank.json
    python3 main.py analyze  --seed 0 --out runs/two_tank
    python3 main.py train    --jobs 4
    python3 main.py evaluate
    python3 main.py ablate
    python3 main.py report

Exit codes: 0 success, 1 invalid command, config or input data, 2 runtime
failure.
"""

import sys

from diagengine.harness import cli

if __name__ == "__main__":
    sys.exit(cli())
