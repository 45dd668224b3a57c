"""Independent numpy derivations of the constants frozen into the Rust tests.

Run with `python3 scripts/oracles.py`; nothing here imports the Rust code.
"""
from math import erf, pi, sqrt

import numpy as np


def mixture_eps(comps, x, sigma):
    """-sigma * grad log p_sigma(x) for a list of (weight, mean, cov)."""
    logs, grads = [], []
    for w, mu, cov in comps:
        s = cov + sigma * sigma * np.eye(2)
        si = np.linalg.inv(s)
        d = x - mu
        logs.append(np.log(w) - 0.5 * d @ si @ d - 0.5 * np.log(np.linalg.det(s)) - np.log(2 * pi))
        grads.append(-si @ d)
    logs = np.array(logs)
    r = np.exp(logs - logs.max())
    r /= r.sum()
    return -sigma * sum(ri * gi for ri, gi in zip(r, grads))


def guided_oracle():
    eye = np.eye(2)
    pre = [(0.5, np.array([-2.0, 0.0]), eye, (0, 0)), (0.5, np.array([2.0, 0.0]), eye, (1, 0))]
    tgt = [(1.0, np.array([0.0, 3.0]), 0.5 * eye, (7, 0))]
    merged = [(w * 0.5, m, c, k) for w, m, c, k in pre] + [(w * 0.5, m, c, k) for w, m, c, k in tgt]
    x, sigma, lam = np.array([0.5, 1.0]), 1.0, 3.0
    strong = mixture_eps([(w, m, c) for w, m, c, k in merged if k == (7, 0)], x, sigma)
    weak = {
        "cfg": mixture_eps([(w, m, c) for w, m, c, _ in merged], x, sigma),
        "pg0": mixture_eps([(w, m, c) for w, m, c, _ in pre], x, sigma),
        # unknown concept under the pretrained oracle falls back to the attribute marginal
        "ag": mixture_eps([(w, m, c) for w, m, c, k in pre if k[1] == 0], x, sigma),
    }
    for name, w in weak.items():
        print(name, list(w + lam * (strong - w)))
    omega = 0.3
    w = omega * weak["cfg"] + (1 - omega) * weak["pg0"]
    print("pg@0.3", list(w + lam * (strong - w)))


def edm_levels(n=50, rho=7.0, smax=10.0, smin=0.01):
    lv = [(smax ** (1 / rho) + i / n * (smin ** (1 / rho) - smax ** (1 / rho))) ** rho for i in range(n + 1)]
    print("edm levels[1], [25], [49]:", lv[1], lv[25], lv[49])


def attribute_accuracy(delta):
    phi = lambda z: 0.5 * (1 + erf(z / sqrt(2)))
    print(f"two-class accuracy at Mahalanobis separation {delta}:", 1 - phi(-delta / 2))


if __name__ == "__main__":
    guided_oracle()
    edm_levels()
    attribute_accuracy(4.0)
    attribute_accuracy(8.0)
