"""End-to-end benchmark: simulate, preprocess, train, prioritize, detect every pipeline, evaluate, report.

Runs the default corpus and a high-noise corpus side by side, each in its own run directory.
"""
from pathlib import Path
from typing import List, Optional, Sequence
import argparse
import logging
import sys
import time

from dotenv import load_dotenv

from app.cli import EXIT_ERROR, run_command
from app.schemas.detection import Pipeline

logger = logging.getLogger(__name__)

HIGH_NOISE_SIGMA = 0.05


def run_suite(run_dir: Path, tasks: int, seed: int, noise_sigma: Optional[float], epochs: Optional[int]) -> bool:
    base = ["--run-dir", str(run_dir)]
    simulate = base + ["simulate", "--tasks", str(tasks), "--seed", str(seed)]
    if noise_sigma is not None:
        simulate += ["--noise-sigma", str(noise_sigma)]
    train = base + ["train", "--integrated"] + (["--epochs", str(epochs)] if epochs is not None else [])
    steps: List[List[str]] = [simulate, base + ["preprocess"], train, base + ["prioritize"]]
    for pipeline in Pipeline:
        steps.append(base + ["detect", "--pipeline", pipeline.value])
        steps.append(base + ["evaluate", "--pipeline", pipeline.value])
    steps.append(base + ["report"])

    for argv in steps:
        started = time.perf_counter()
        status = run_command(argv)
        logger.info(f"{' '.join(argv[2:])}: exit {status} in {time.perf_counter() - started:.1f}s")
        if status == EXIT_ERROR:
            logger.error(f"Benchmark stopped at `{' '.join(argv[2:])}`")
            return False
    return True


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="fleetwatch end-to-end benchmark")
    parser.add_argument("--root", type=Path, default=Path("runs/benchmark"))
    parser.add_argument("--tasks", type=int, default=200)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--epochs", type=int, default=None)
    args = parser.parse_args(argv)

    started = time.perf_counter()
    ok = run_suite(args.root / "default", args.tasks, args.seed, None, args.epochs)
    ok = ok and run_suite(args.root / "high-noise", args.tasks, args.seed, HIGH_NOISE_SIGMA, args.epochs)
    logger.info(f"Benchmark finished in {time.perf_counter() - started:.1f}s")
    return 0 if ok else 1


if __name__ == "__main__":
    load_dotenv(override=True)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(main())
