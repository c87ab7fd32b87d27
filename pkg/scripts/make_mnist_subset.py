"""Build the bundled 5000-digit MNIST subset as gzipped IDX files.

The source is ``mnist_5k.csv.gz`` (784 pixel columns then the label), as
shipped inside the mlxtend wheel.  Pass either that CSV or the wheel::

    pip download mlxtend==0.24.0 --no-deps -d /tmp/pd
    python3 scripts/make_mnist_subset.py /tmp/pd/mlxtend-0.24.0-py3-none-any.whl data/mnist
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from sidgrad.data import Dataset, load_idx, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(path: Path) -> np.ndarray:
    if path.suffix == ".whl":
        with zipfile.ZipFile(path) as zf:
            raw = zf.read(MEMBER)
    else:
        raw = path.read_bytes()
    text = gzip.decompress(raw).decode()
    return np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()
    arr = read_source(args.source)
    if arr.shape[1] != 785:
        raise SystemExit(f"expected 785 columns, got {arr.shape[1]}")
    pixels, labels = arr[:, :784], arr[:, 784]
    ds = Dataset(pixels / 255.0, labels, 255.0, (28, 28))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    img = args.out_dir / "mnist5k-images-idx3-ubyte.gz"
    lab = args.out_dir / "mnist5k-labels-idx1-ubyte.gz"
    write_idx(ds, img, lab)
    back = load_idx(img, lab)
    assert np.array_equal(np.rint(back.X * 255), pixels) and np.array_equal(back.y, labels)
    print(f"wrote {ds.n} images to {img} and {lab}")


if __name__ == "__main__":
    main()
