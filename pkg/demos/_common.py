"""Shared bits for the demo scripts: config loading with an optional quick mode."""
import argparse
from pathlib import Path

from weightmask.cli import apply_overrides
from weightmask.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def demo_config(name: str, quick: list[str], description: str):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--quick", action="store_true", help="tiny step counts, for checking the script runs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(CONFIGS / name)
    return (apply_overrides(cfg, quick) if args.quick else cfg), args.seed


def pct(x: float) -> str:
    return f"{100 * x:5.1f}%"
