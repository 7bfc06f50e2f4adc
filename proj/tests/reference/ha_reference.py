"""Historical-average test RMSE for a dataset directory, written against the
raw file layout only (numpy, no project code).

usage: python3 ha_reference.py DATA_DIR [q] [p]
"""
import json
import sys

import numpy as np


def main():
    root = sys.argv[1]
    q = int(sys.argv[2]) if len(sys.argv) > 2 else 12
    p = int(sys.argv[3]) if len(sys.argv) > 3 else 4
    meta = json.load(open(f"{root}/meta.json"))
    n, s, d = meta["N"], meta["S"], meta["D"]
    act = np.fromfile(f"{root}/activity.f32", dtype="<f4").astype(np.float64).reshape(s, n)

    windows = s - q - p + 1
    n_train = windows * 7 // 10
    n_val = windows // 10
    test = range(n_train + n_val, windows)
    train_steps = (n_train - 1) + q + p

    t = np.arange(s)
    slot = ((meta["start_weekday"] + t // d) % 7) * d + t % d
    sums = np.zeros((7 * d, n))
    counts = np.zeros(7 * d)
    np.add.at(sums, slot[:train_steps], act[:train_steps])
    np.add.at(counts, slot[:train_steps], 1)
    node_mean = act[:train_steps].mean(axis=0)

    err = []
    for w in test:
        for k in range(p):
            step = w + q + k
            c = counts[slot[step]]
            pred = sums[slot[step]] / c if c else node_mean
            err.append(pred - act[step])
    err = np.array(err)
    print(f"windows {windows} train {n_train} val {n_val} test {len(test)}")
    print(f"ha_test_rmse {np.sqrt(np.mean(err ** 2)):.9f}")


if __name__ == "__main__":
    main()
