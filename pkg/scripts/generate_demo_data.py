"""Regenerate the bundled demo CSVs in data/ from a fixed seed.

Run from the repository root:  python3 scripts/generate_demo_data.py
"""

import csv
import pathlib

from glmpo2pls import SimSetting, generate_dataset

SEED = 20260401
OUT_DIR = pathlib.Path(__file__).resolve().parent.parent / "data"


def write_matrix(path, prefix, mat):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{prefix}{j + 1}" for j in range(mat.shape[1])])
        for row in mat:
            writer.writerow([repr(float(v)) for v in row])


def main():
    setting = SimSetting(N=200, p=20, q=5, heterogeneity=0.4,
                         noise_x=0.4, noise_y=0.4)
    sim = generate_dataset(setting, SEED)
    OUT_DIR.mkdir(exist_ok=True)
    write_matrix(OUT_DIR / "demo_x.csv", "x", sim.train.X)
    write_matrix(OUT_DIR / "demo_y.csv", "y", sim.train.Y)
    write_matrix(OUT_DIR / "demo_z.csv", "z", sim.train.z.reshape(-1, 1))
    print(f"wrote demo_x.csv, demo_y.csv, demo_z.csv to {OUT_DIR}")


if __name__ == "__main__":
    main()
