"""Minimal sufficient statistic and IB curve of a small discrete channel.

    python demos/mss_and_ib.py
"""
import numpy as np

from vibmark import ib, mss
from vibmark.info import JointPMF, mutual_information

j = mss.four_symbol_channel()
report = mss.verify_theorems(j)
print("MSS partition:", report.mss, f"rate {report.rate:.4f} nats")
print("sufficiency checks hold:", report.theorem2_holds and report.theorem3_holds)

# a noisier channel with a non-trivial curve
rng = np.random.default_rng(4)
noisy = JointPMF(rng.dirichlet(np.ones(12)).reshape(3, 4))
print(f"\nI(X;M) = {mutual_information(noisy):.4f} nats")
points = ib.trace_curve(noisy, np.geomspace(2.0, 0.02, 12), restarts=3)
print(f"{'beta':>8} {'I(Z;X)':>8} {'I(Z;M)':>8}")
for p in points:
    print(f"{p.beta:8.4f} {p.rate:8.4f} {p.relevance:8.4f}")
geo = ib.check_curve_geometry(points)
print("monotone:", geo.monotone, "convex:", geo.convex)
