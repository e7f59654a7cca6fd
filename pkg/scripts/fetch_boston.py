"""Rebuild data/boston_housing.csv from the copy bundled with scikit-learn 1.1.x.

Downloads the scikit-learn 1.1.3 wheel with pip (no install), extracts
``sklearn/datasets/data/boston_house_prices.csv``, drops its leading
"506,13" count line and writes a plain header-plus-rows CSV.
"""

import glob
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data" / "boston_housing.csv"
MEMBER = "sklearn/datasets/data/boston_house_prices.csv"


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
             "--python-version", "3.10", "--platform", "manylinux2014_x86_64", "scikit-learn==1.1.3", "-d", tmp],
            check=True,
        )
        wheel = glob.glob(f"{tmp}/scikit_learn-1.1.3-*.whl")[0]
        text = zipfile.ZipFile(wheel).read(MEMBER).decode("utf-8")
    lines = [line.replace('"', "").rstrip("\r") for line in text.splitlines()[1:] if line.strip()]
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({len(lines) - 1} rows)")


if __name__ == "__main__":
    main()
