"""Replay the bundled "Run VAE on cardio.mat" session in a scratch directory.

Needs no network or API key. Stages the miniature cardio dataset, puts the
stub detector libraries on the child PYTHONPATH and prints the banner
transcript plus the generated script's location:

    python3 scripts/demo_replay.py [--keep DIR]
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import helpers  # noqa: E402
from ad_agent.cli import main  # noqa: E402


def run(workdir: Path) -> int:
    helpers.write_cardio(workdir / "data" / "cardio.mat")
    os.chdir(workdir)
    os.environ["PYTHONPATH"] = str(helpers.STUBS)
    code = main(["run", "Run VAE on cardio.mat", "--llm-backend", "replay",
                 "--transcript", str(helpers.TRANSCRIPTS / "vae_cardio.jsonl"),
                 "--cache-path", str(workdir / "cache.json"), "--interpreter", sys.executable])
    script = workdir / "generated_scripts" / "VAE_cardio.py"
    if script.exists():
        print(f"\ngenerated script: {script}")
    return code


def cli() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--keep", help="run inside this directory instead of a temporary one")
    args = parser.parse_args()
    if args.keep:
        path = Path(args.keep).resolve()
        path.mkdir(parents=True, exist_ok=True)
        return run(path)
    with tempfile.TemporaryDirectory() as tmp:
        return run(Path(tmp))


if __name__ == "__main__":
    raise SystemExit(cli())
