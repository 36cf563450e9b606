"""Spectral signature of the purification proxy on synthetic covers.

    python demos/spectra.py
"""
import numpy as np

from vibmark import analysis, noise
from vibmark.data import power_law_covers, stream

covers = power_law_covers(100, 32, seed=0)
spec = noise.parse_spec("purify(gamma=0.5, sigma=0.02)")
out = noise.apply(spec, covers, covers, stream(0, "demo"))

for name, imgs in (("covers", covers), ("s_atk", out.s_atk)):
    e = analysis.mean_band_energy(imgs)
    print(f"{name:>7}: low {e.low:.3f}  mid {e.mid:.3f}  high {e.high:.3f}")
pcc = np.mean([analysis.pearson_cc(a, c) for a, c in zip(out.s_atk, covers)])
print(f"mean PCC(s_atk, cover) = {pcc:.3f}")
