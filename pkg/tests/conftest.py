import math
from pathlib import Path

import numpy as np


def write_mrclam(root, n_robots=3, duration=60.0, seed=0, hz=20.0, noise=True):
    """Small synthetic dataset in the MR.CLAM text layout.

    Robots drive smooth arcs among six landmarks; every 7th odometry tick
    each robot ranges everything within 6 m.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lms = {n_robots + 1 + j: rng.uniform(-5, 5, 2) for j in range(6)}
    subjects = list(range(1, n_robots + 1)) + list(lms)
    (root / "Barcodes.dat").write_text(
        "# Subject # Barcode #\n" + "".join(f"{s} {10 * s + 3}\n" for s in subjects))
    (root / "Landmark_Groundtruth.dat").write_text(
        "# Subject x y x_sd y_sd\n" + "".join(f"{s} {p[0]:.6f} {p[1]:.6f} 0.001 0.001\n" for s, p in lms.items()))
    t = np.arange(0, duration + 1e-9, 1 / hz)
    poses = {}
    for i in range(1, n_robots + 1):
        v = np.full(t.size, 0.3 + 0.1 * rng.random())
        w = 0.3 * np.sin(0.1 * t + i)
        x = np.zeros((t.size, 3))
        x[0] = [*rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi)]
        for k in range(1, t.size):
            dt, th = t[k] - t[k - 1], x[k - 1, 2]
            x[k] = [x[k - 1, 0] + v[k - 1] * dt * math.cos(th), x[k - 1, 1] + v[k - 1] * dt * math.sin(th),
                    th + w[k - 1] * dt]
        x[:, 2] = (x[:, 2] + np.pi) % (2 * np.pi) - np.pi
        poses[i] = x
        (root / f"Robot{i}_Groundtruth.dat").write_text(
            "# Time x y theta\n" + "".join(f"{a:.3f} {b:.6f} {c:.6f} {d:.6f}\n" for a, (b, c, d) in zip(t, x)))
        on = noise * rng.normal(0, [0.02, 0.03], (t.size, 2))
        (root / f"Robot{i}_Odometry.dat").write_text(
            "# Time v w\n" + "".join(f"{a:.3f} {p + n0:.5f} {q + n1:.5f}\n" for a, p, q, (n0, n1) in zip(t, v, w, on)))
    for i in range(1, n_robots + 1):
        lines = ["# Time Barcode range bearing\n"]
        for k in range(0, t.size, 7):
            X = poses[i][k]
            for s in subjects:
                if s == i:
                    continue
                p = lms[s] if s in lms else poses[s][k, :2]
                d = p - X[:2]
                r, b = np.hypot(*d), math.atan2(d[1], d[0]) - X[2]
                if r > 6:
                    continue
                b = (b + np.pi) % (2 * np.pi) - np.pi
                if noise:
                    r += rng.normal(0, 0.05)
                    b += rng.normal(0, math.radians(1))
                lines.append(f"{t[k] + 0.01:.3f} {10 * s + 3} {r:.5f} {b:.5f}\n")
        (root / f"Robot{i}_Measurement.dat").write_text("".join(lines))
    return root


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Remember one acceptance verdict; printed again in the terminal summary."""
    status = "PASS" if passed else "FAIL"
    if passed is None:
        status = "SKIP"
    line = f"criterion {criterion:>2}: {status}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
