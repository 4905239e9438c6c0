"""Download the four MNIST IDX files into a data directory.

    python scripts/fetch_mnist.py [DEST]   (default: data/mnist)

The files are taken from the ``MNIST-dir`` wheel on PyPI, which ships the
original uncompressed IDX files, and checked against their known MD5 sums.
The library itself never downloads anything.
"""
import hashlib
import io
import sys
import urllib.request
import zipfile
from pathlib import Path

WHEEL = ("https://files.pythonhosted.org/packages/5c/42/504919bf729ad48c424afee77c993f727add4b333b3941125ad657a5c445/"
         "MNIST_dir-0.2.0-py3-none-any.whl")
MD5 = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte": "27ae3e4e09519cfbb04c329615203637",
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    dest = Path(argv[0] if argv else "data/mnist")
    dest.mkdir(parents=True, exist_ok=True)
    if all((dest / name).is_file() for name in MD5):
        print(f"MNIST already present in {dest}")
        return 0
    print(f"downloading {WHEEL.rsplit('/', 1)[-1]} ...")
    with urllib.request.urlopen(WHEEL, timeout=120) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        for member in zf.namelist():
            name = member.rsplit("/", 1)[-1]
            if name in MD5:
                data = zf.read(member)
                digest = hashlib.md5(data).hexdigest()
                if digest != MD5[name]:
                    print(f"checksum mismatch for {name}: {digest}", file=sys.stderr)
                    return 1
                (dest / name).write_bytes(data)
                print(f"wrote {dest / name}")
    missing = [n for n in MD5 if not (dest / n).is_file()]
    if missing:
        print(f"wheel did not contain: {', '.join(missing)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
