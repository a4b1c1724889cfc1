"""Generate the committed toy bundle fixture through the production flow.

Runs the simulator CLI to export a labeled corpus, trains the source model on
it with the training CLI, and drops the bundle (plus its training curve) into
the runtime package's test fixtures. Usage:

    python trainer/scripts/make_toy_bundle.py [--epochs N] [--out PATH]
"""

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[2]
DEFAULT_OUT = REPO / "tests" / "fixtures" / "toy_acvae.fmv"


def main(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, default=120)
    parser.add_argument("--utterances", type=int, default=24)
    parser.add_argument("--out", default=str(DEFAULT_OUT))
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        corpus = Path(tmp) / "corpus"
        subprocess.run(
            [
                sys.executable, "-m", "fastsep.cli",
                "simulate", "--out", str(Path(tmp) / "scenes"), "--scenes", "1",
                "--classes", "4", "--utterance-s", "4.5", "--seed", "42",
                "--export-corpus", str(corpus),
                "--corpus-utterances", str(args.utterances),
            ],
            check=True,
        )
        subprocess.run(
            [
                sys.executable, "-m", "fastsep_trainer.cli",
                "--corpus", str(corpus), "--classes", "4",
                "--out", str(out),
                "--epochs", str(args.epochs),
                "--hidden", "40", "--classifier-hidden", "16",
                "--latent-channels", "16",
                "--win-ms", "128", "--hop-ms", "64",
                "--seed", str(args.seed),
                "--curve-out", str(out.with_suffix(".curve.csv")),
            ],
            check=True,
        )
    print(f"fixture written to {out}")


if __name__ == "__main__":
    main()
