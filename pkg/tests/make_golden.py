"""Regenerate the committed CLI reference fixtures.

Run from the repository root::

    python3 tests/make_golden.py

Writes the synthetic input dataset to ``tests/data`` and the expected
pipeline outputs to ``tests/golden``. The golden files are byte
snapshots of the pipeline's own output on the bundled dataset; any
intentional change to output formats or matching numerics must
regenerate them (and the diff then documents the change).
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np

from dicfield.cli import parse_and_dispatch

HERE = Path(__file__).resolve().parent
DATA = HERE / "data"
GOLDEN = HERE / "golden"

# the 2D pipeline configuration the golden tests replay
RUN_FLAGS = ["--roi", "24,24,72,72", "--spacing", "6",
             "--subset-m", "8", "--seed", "48,48"]
STRAIN_FLAGS = ["--window-radius", "2"]


def _run(argv):
    code = parse_and_dispatch(argv)
    if code != 0:
        raise RuntimeError(f"pipeline step failed ({code}): {argv}")


def main() -> None:
    DATA.mkdir(exist_ok=True)
    GOLDEN.mkdir(exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        _run(["speckle", "gen", "--out", str(tmp / "gen"),
              "--width", "96", "--height", "96", "--seed", "11"])
        shutil.copyfile(tmp / "gen" / "pattern.png",
                        DATA / "speckle_ref.png")
        _run(["synth", "deform", "--out", str(tmp / "warp"),
              "--input", str(DATA / "speckle_ref.png"),
              "--warp", "translation", "--u", "0.37", "--v", "-0.21"])
        shutil.copyfile(tmp / "warp" / "deformed.png",
                        DATA / "speckle_def.png")

        _run(["dic2d", "run", "--out", str(tmp / "disp"),
              "--ref", str(DATA / "speckle_ref.png"),
              "--def", str(DATA / "speckle_def.png")] + RUN_FLAGS)
        _run(["dic2d", "strain", "--out", str(tmp / "strain"),
              "--field", str(tmp / "disp")] + STRAIN_FLAGS)
        for src, dst in [
            (tmp / "disp" / "displacement.csv", "displacement.csv"),
            (tmp / "disp" / "grid.json", "grid.json"),
            (tmp / "strain" / "strain.csv", "strain.csv"),
            (tmp / "strain" / "e_xx.png", "e_xx.png"),
        ]:
            shutil.copyfile(src, GOLDEN / dst)

    # fatigue-law sample: crack length forward-integrated from
    # da/dN = A dK^n with dK(N) = c0 + c1 N, so the fit is checkable
    c0, c1, A, n = 10.0, 2e-4, 1e-8, 3.0
    N = np.linspace(0.0, 1e5, 101)
    a = 1.0 + A / (c1 * (n + 1)) * ((c0 + c1 * N) ** (n + 1)
                                    - c0 ** (n + 1))
    dK = c0 + c1 * N
    lines = ["N,a,dK"] + [f"{float(x)!r},{float(y)!r},{float(k)!r}"
                          for x, y, k in zip(N, a, dK)]
    (DATA / "paris.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {DATA} and {GOLDEN}")


if __name__ == "__main__":
    main()
