"""Builds the 5,000-image MNIST subset used by the desk-scale experiments.

Source: the `mnist_5k.csv.gz` table shipped inside the mlxtend wheel
(500 images per digit, rows sorted by label, 784 pixels then the label).
Writes gzip-compressed IDX files: 400 images per class for training and
100 per class for testing, interleaved by class so that any prefix is
roughly balanced.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-subset
"""

import gzip
import struct
import sys
import zipfile


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + payload)


def main(wheel, out_dir):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [line.split(",") for line in gzip.decompress(raw).decode().strip().split("\n")]
    by_class = {c: [] for c in range(10)}
    for row in rows:
        by_class[int(row[-1])].append(bytes(int(v) for v in row[:-1]))

    for name, lo, hi in (("train", 0, 400), ("test", 400, 500)):
        images, labels = [], []
        for i in range(lo, hi):
            for c in range(10):
                images.append(by_class[c][i])
                labels.append(c)
        n = len(labels)
        write_idx(f"{out_dir}/{name}-images-idx3-ubyte.gz", 0x00000803, (n, 28, 28), b"".join(images))
        write_idx(f"{out_dir}/{name}-labels-idx1-ubyte.gz", 0x00000801, (n,), bytes(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
