"""Regenerate the golden fixtures (only when the format version changes).

    python3 tests/data/make_golden.py
"""

from pathlib import Path

from teso import EncoderSettings, encode_teso, read_ply, write_ply
from teso.synthetic import sphere

HERE = Path(__file__).parent
SETTINGS = EncoderSettings(tau=64.0, qt=20)


def golden_cloud():
    return sphere(radius=16)


if __name__ == "__main__":
    write_ply(golden_cloud(), HERE / "golden.ply")
    cloud = read_ply(HERE / "golden.ply", depth=10)  # encode what the test will read
    data, report = encode_teso(cloud, SETTINGS)
    (HERE / "golden.teso").write_bytes(data)
    print(f"{len(cloud)} points, {len(data)} bytes, {report.tree.n_leaves} leaves")
