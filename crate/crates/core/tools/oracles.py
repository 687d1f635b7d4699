"""Independent reference values frozen into the Rust unit tests.

Run with `python3 tools/oracles.py`; it rewrites the `.in` fragments under
tests/data/ and prints the scalar references.
"""
import math
import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.join(HERE, "..", "tests", "data")


def weighted_normal_reference():
    fx, fy, cx, cy = 5.0, 6.0, 1.5, 1.2
    d = np.array([[2.0, 2.1, 2.3, 2.2], [1.9, 2.05, 2.4, 2.35], [1.8, 2.0, 2.5, 2.6]])
    g = np.array([[0.1, 0.5, 0.2, 0.9], [0.3, 0.3, 0.7, 0.1], [0.8, 0.6, 0.4, 0.2]])
    h, w = d.shape

    def point(x, y):
        return d[y, x] * np.array([(x - cx) / fx, (y - cy) / fy, 1.0])

    def diff(f, x, y, sx, sy):
        # difference along (sx, sy), origin moved inside when the step leaves the image
        qx = min(max(x, max(-sx, 0)), w - 1 - max(sx, 0))
        qy = min(max(y, max(-sy, 0)), h - 1 - max(sy, 0))
        return f(qx + sx, qy + sy) - f(qx, qy)

    pairs = [((1, 0), (0, 1)), ((-1, 0), (0, -1)), ((1, 1), (-1, 1)), ((-1, -1), (1, -1))]
    out = {}
    for (x, y) in [(0, 0), (1, 1), (3, 2), (2, 0)]:
        n = np.zeros(3)
        for a, b in pairs:
            wa = math.exp(-0.5 * abs(diff(lambda u, v: g[v, u], x, y, *a)))
            wb = math.exp(-0.5 * abs(diff(lambda u, v: g[v, u], x, y, *b)))
            n += 0.25 * wa * wb * np.cross(diff(point, x, y, *a), diff(point, x, y, *b))
        out[(x, y)] = n / np.linalg.norm(n)
    return out


def rho_diffuse(theta, eta):
    s2 = math.sin(theta) ** 2
    num = (eta - 1 / eta) ** 2 * s2
    den = 2 + 2 * eta**2 - (eta + 1 / eta) ** 2 * s2 + 4 * math.cos(theta) * math.sqrt(eta**2 - s2)
    return num / den


def rho_specular(theta, eta):
    s2 = math.sin(theta) ** 2
    num = 2 * s2 * math.cos(theta) * math.sqrt(eta**2 - s2)
    den = eta**2 - s2 - eta**2 * s2 + 2 * s2**2
    return num / den


def brewster_by_search(eta):
    # golden-section maximisation of the specular curve
    lo, hi = 0.0, math.pi / 2 - 1e-9
    phi = (math.sqrt(5) - 1) / 2
    for _ in range(200):
        a = hi - phi * (hi - lo)
        b = lo + phi * (hi - lo)
        if rho_specular(a, eta) < rho_specular(b, eta):
            lo = a
        else:
            hi = b
    return 0.5 * (lo + hi)


def ssim_constant(a, b, c1=0.01**2, c2=0.03**2):
    return ((2 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2)


if __name__ == "__main__":
    os.makedirs(DATA, exist_ok=True)
    for (x, y), n in weighted_normal_reference().items():
        with open(os.path.join(DATA, f"normal_ref_{x}_{y}.in"), "w") as fh:
            fh.write("[{:.17e}, {:.17e}, {:.17e}]\n".format(*n))
    print("rho_d(pi/4, 1.5) =", repr(rho_diffuse(math.pi / 4, 1.5)))
    for eta in (1.3, 1.5, 2.0):
        t = brewster_by_search(eta)
        print(f"brewster({eta}) search={t!r} atan={math.atan(eta)!r} rho_s={rho_specular(math.atan(eta), eta)!r}")
    thetas = np.linspace(0, math.radians(80), 2001)
    print("max rho_d on [0,80deg], eta 1.5 =", max(rho_diffuse(t, 1.5) for t in thetas))
    s = ssim_constant(0.2, 0.5)
    print("ssim(0.2,0.5) =", repr(s), " epe =", repr(0.85 * (1 - s) / 2 + 0.15 * 0.3))
