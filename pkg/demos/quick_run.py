"""Train a tiny watermark model, embed a message and read it back.

Takes a few minutes on one core and ends at roughly 10-25% BER. The
full-size configuration lives in tests/acceptance.ini.

    python demos/quick_run.py [output_dir]
"""
import json
import sys
from pathlib import Path

from vibmark import experiment

CONFIG = """
[run]
name = quick
seed = 0

[model]
msg_len = 8
size = 16
channels = 8
feat_dim = 32

[vib]
latent_dim = 16
beta = 0.00015

[train]
epochs = 12
n_covers = 400
learning_rate = 0.005
pool = identity; jpeg(keep_y=25); purify(gamma=0.3,sigma=0.02)

[eval]
attacks = identity; jpeg(keep_y=25); purify(gamma=0.5,sigma=0.02)
n_test = 100
n_interference = 50
"""

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs") / "quick"
cfg = experiment.parse_config(CONFIG, "<quick>")
run = experiment.run_experiment(cfg, out, log=lambda row: print(f"epoch {row['epoch']}: val_BER {row['val_BER']:.3f}"))
report = json.loads((run / "report.json").read_text())
for attack, r in report["attacks"].items():
    print(f"{attack:>32}: BER {r['ber']:.3f}  PSNR {r['psnr']:.1f} dB")
print("written to", run)
