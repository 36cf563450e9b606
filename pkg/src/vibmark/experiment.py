"""Config-driven training runs, beta sweeps and run comparison.

Config files are INI documents (``configparser`` syntax). Every key is
optional except where noted; unknown sections or keys are rejected::

    [run]
    name = demo              ; output subdirectory
    seed = 0
    output_dir = runs        ; overridden by $VIBMARK_OUTPUT_ROOT
    checkpoint =             ; load weights instead of training

    [model]
    msg_len = 16
    size = 32
    channels = 16
    feat_dim = 64
    carrier_block = 2        ; 0 = constant message planes + mean pooling
    residual_bound = 0.028   ; |residual| <= bound via tanh; 0 = unbounded

    [vib]
    enabled = true           ; false = deterministic U = mu, no KL term
    alpha = 0.007
    beta = 0.00015
    latent_dim = 32
    logvar_clip = -10, 10

    [train]
    epochs = 20
    batch_size = 32
    learning_rate = 0.001
    lambda_img = 1.0
    lambda_rec = 1.0
    n_covers = 2000
    val_fraction = 0.1
    pool = crop(ratio=0.4..0.55); jpeg(keep_y=25)

    [eval]
    attacks = identity; purify(gamma=0.5,sigma=0.02)
    n_test = 400
    interference_attack = purify(gamma=0.5,sigma=0.02)
    n_interference = 200
    noise_sigma = 0.05

    [sweep]
    betas = 0, 1e-5, 5e-5, 1e-4, 1.5e-4, 2e-4, 3e-4
    seeds = 0

Distortion lists are separated by ``;``. In a sweep, beta = 0 is the
baseline run with the bottleneck disabled.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, noise
from . import net
from .data import power_law_covers, random_messages, stream

OUTPUT_ENV = "VIBMARK_OUTPUT_ROOT"
DEFAULT_SWEEP = (0.0, 1e-5, 5e-5, 1e-4, 1.5e-4, 2e-4, 3e-4)
DEFAULT_EVAL = ("identity", "purify(gamma=0.5,sigma=0.02)")

METRIC_COLUMNS = ("run", "tag", "attack", "ber", "psnr", "L_img", "L_rec", "L_KL", "rho", "al_mean", "al_sd")


class ConfigError(ValueError):
    pass


class CompareError(ValueError):
    def __init__(self, message: str, only_a=(), only_b=()):
        super().__init__(message)
        self.only_a = sorted(only_a)
        self.only_b = sorted(only_b)

    def as_dict(self):
        return {"error": str(self), "only_in_a": self.only_a, "only_in_b": self.only_b}


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    output_dir: str = "runs"
    checkpoint: str | None = None
    msg_len: int = 16
    size: int = 32
    channels: int = 16
    feat_dim: int = 64
    carrier_block: int = 2
    residual_bound: float = 0.028
    vib_enabled: bool = True
    alpha: float = 0.007
    beta: float = 1.5e-4
    latent_dim: int = 32
    logvar_clip: tuple = (-10.0, 10.0)
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_img: float = 1.0
    lambda_rec: float = 1.0
    n_covers: int = 2000
    val_fraction: float = 0.1
    pool: list = field(default_factory=lambda: list(noise.TABLE8_POOL))
    attacks: list = field(default_factory=lambda: list(DEFAULT_EVAL))
    n_test: int = 400
    interference_attack: str = "purify(gamma=0.5,sigma=0.02)"
    n_interference: int = 200
    noise_sigma: float = 0.05
    betas: list | None = None
    seeds: list = field(default_factory=lambda: [0])

    def vib(self) -> net.VIBConfig:
        return net.VIBConfig(self.alpha, self.beta, self.latent_dim, self.logvar_clip)

    def train_config(self) -> net.TrainConfig:
        return net.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                               lambda_img=self.lambda_img, lambda_rec=self.lambda_rec, seed=self.seed,
                               pool=list(self.pool), vib_enabled=self.vib_enabled, val_fraction=self.val_fraction)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["logvar_clip"] = list(self.logvar_clip)
        return d


# section -> key -> (field name, parser)
def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _specs(text: str) -> list:
    items = [s.strip() for s in text.replace("\n", ";").split(";") if s.strip()]
    for s in items:
        noise.parse_spec(s)
    return items


def _opt_str(text: str):
    return text.strip() or None


_SCHEMA = {
    "run": {"name": ("name", str), "seed": ("seed", int), "output_dir": ("output_dir", str),
            "checkpoint": ("checkpoint", _opt_str)},
    "model": {"msg_len": ("msg_len", int), "size": ("size", int), "channels": ("channels", int),
              "feat_dim": ("feat_dim", int), "carrier_block": ("carrier_block", int),
              "residual_bound": ("residual_bound", float)},
    "vib": {"enabled": ("vib_enabled", _bool), "alpha": ("alpha", float), "beta": ("beta", float),
            "latent_dim": ("latent_dim", int), "logvar_clip": ("logvar_clip", lambda t: tuple(_floats(t)))},
    "train": {"epochs": ("epochs", int), "batch_size": ("batch_size", int), "learning_rate": ("learning_rate", float),
              "lambda_img": ("lambda_img", float), "lambda_rec": ("lambda_rec", float),
              "n_covers": ("n_covers", int), "val_fraction": ("val_fraction", float), "pool": ("pool", _specs)},
    "eval": {"attacks": ("attacks", _specs), "n_test": ("n_test", int),
             "interference_attack": ("interference_attack", lambda t: _specs(t)[0]),
             "n_interference": ("n_interference", int), "noise_sigma": ("noise_sigma", float)},
    "sweep": {"betas": ("betas", _floats), "seeds": ("seeds", _ints)},
}


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, for diagnostics."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif "=" in line and not line.startswith((";", "#")) and section:
            lines[(section, line.split("=", 1)[0].strip().lower())] = no
    return lines


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate an INI document into an ExperimentConfig.

    All problems are collected and raised together as one ConfigError, each
    prefixed with ``source:line``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    where = _key_lines(text)
    errors, values = [], {}
    for section in cp.sections():
        if section not in _SCHEMA:
            errors.append(f"{source}: unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            loc = f"{source}:{where.get((section, key), '?')}"
            if key not in _SCHEMA[section]:
                errors.append(f"{loc}: unknown key '{key}' in [{section}]")
                continue
            fname, conv = _SCHEMA[section][key]
            try:
                values[fname] = conv(raw)
            except (ValueError, TypeError, IndexError) as exc:
                errors.append(f"{loc}: [{section}] {key} = {raw!r}: {exc}")
    if not errors:
        try:
            cfg = ExperimentConfig(**values)
            validate(cfg)
            return cfg
        except ValueError as exc:
            errors.append(f"{source}: {exc}")
    raise ConfigError("\n".join(errors))


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), str(path))


def validate(cfg: ExperimentConfig) -> None:
    """Semantic checks that need more than one field."""
    for name in ("epochs", "batch_size", "n_covers", "n_test", "msg_len", "size", "latent_dim", "channels"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"{name} must be positive")
    if not 0 < cfg.val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    if cfg.n_test < 4:
        raise ValueError("n_test must be at least 4 (detection uses four disjoint quarters)")
    if len(cfg.logvar_clip) != 2 or cfg.logvar_clip[0] >= cfg.logvar_clip[1]:
        raise ValueError("logvar_clip needs two increasing values")
    if cfg.betas is not None and any(b < 0 for b in cfg.betas):
        raise ValueError("sweep betas must be non-negative")
    cfg.vib()
    cfg.train_config()
    noise.parse_spec(cfg.interference_attack)
    if cfg.residual_bound < 0:
        raise ValueError("residual_bound must be non-negative")
    net.carrier_bank(cfg.size, cfg.size, cfg.msg_len, cfg.carrier_block)


# running ------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


def _metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_plot(path, xs, ys) -> None:
    """Two-column whitespace-separated text: x y."""
    with open(path, "w") as fh:
        for x, y in zip(xs, ys):
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def read_plot(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)


def held_out_set(cfg: ExperimentConfig):
    """Held-out covers and messages, independent of the training streams."""
    covers = power_law_covers(cfg.n_test, cfg.size, cfg.seed, purpose="test-covers")
    msgs = random_messages(stream(cfg.seed, "test-messages"), cfg.n_test, cfg.msg_len)
    return covers, msgs


def evaluate(model: net.WatermarkModel, cfg: ExperimentConfig) -> dict:
    """Held-out BER/PSNR per attack, interference statistics and detection."""
    covers, msgs = held_out_set(cfg)
    x_wm = net.embed(model, covers, msgs).data
    per_attack = {}
    for name in cfg.attacks:
        spec = noise.parse_spec(name)
        res = net.evaluate_ber(model, covers, msgs, spec, stream(cfg.seed, f"eval:{spec}"))
        attacked = noise.apply(spec, x_wm, covers, stream(cfg.seed, f"eval:{spec}")).image.data
        al = analysis.al_scores(model, attacked)
        per_attack[str(spec)] = {"ber": res["ber"], "psnr": res["psnr"],
                                 "al_mean": float(al.mean()), "al_sd": float(al.std())}

    n_int = min(cfg.n_interference, cfg.n_test)
    ispec = noise.parse_spec(cfg.interference_attack)
    reports = analysis.interference_batch(model, covers[:n_int], msgs[:n_int], ispec,
                                          stream(cfg.seed, f"interference:{ispec}"))
    interference = analysis.summarize(reports)
    if str(ispec) in per_attack:
        per_attack[str(ispec)]["rho"] = interference["rho"]["mean"]

    q = cfg.n_test // 4
    gauss = noise.parse_spec(f"gaussian(sigma={cfg.noise_sigma})")
    wm_eval = x_wm[3 * q:4 * q]
    noised = noise.apply(gauss, wm_eval, covers[3 * q:4 * q], stream(cfg.seed, "detect-noise")).image.data
    detection = analysis.detection_eval(model, covers[2 * q:3 * q], wm_eval, noised,
                                        calib_clean=covers[:q], calib_wm=x_wm[q:2 * q])

    s_wm = x_wm - covers
    atk = noise.apply(ispec, x_wm, covers, stream(cfg.seed, f"spectral:{ispec}"))
    spectral = {"covers": analysis.mean_band_energy(covers).as_dict(),
                "s_atk": analysis.mean_band_energy(atk.s_atk).as_dict()}
    pcc = {"s_atk_vs_cover": float(np.mean([analysis.pearson_cc(a, c) for a, c in zip(atk.s_atk, covers)]))}
    if np.all(np.std(s_wm, axis=(1, 2)) > 0):
        spectral["s_wm"] = analysis.mean_band_energy(s_wm).as_dict()
        pcc["s_wm_vs_cover"] = float(np.mean([analysis.pearson_cc(a, c) for a, c in zip(s_wm, covers)]))
    return {"attacks": per_attack, "interference": interference, "interference_attack": str(ispec),
            "detection": detection.as_dict(), "band_energy": spectral, "pcc": pcc}


def _train_or_load(cfg: ExperimentConfig, log=None):
    if cfg.checkpoint:
        return net.WatermarkModel.load(cfg.checkpoint), []
    covers = power_law_covers(cfg.n_covers, cfg.size, cfg.seed)
    model = net.init_model(cfg.msg_len, cfg.size, cfg.vib(), cfg.seed, cfg.channels, cfg.feat_dim,
                           carrier_block=cfg.carrier_block, residual_bound=cfg.residual_bound)
    return net.train(model, cfg.train_config(), covers, log)


def run_experiment(cfg: ExperimentConfig, out_dir=None, log=None) -> Path:
    """Train (or load), evaluate and write every artifact of one run.

    Files: metrics.csv, report.json, checkpoint.json and loss_<name>.dat plot
    data. Work happens in a scratch directory that replaces ``out_dir`` only
    on success, so an aborted run leaves nothing behind.
    """
    validate(cfg)
    out = Path(out_dir) if out_dir is not None else cfg.output_root() / cfg.name
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        model, history = _train_or_load(cfg, log)
        result = evaluate(model, cfg)
        rows = [{"run": cfg.name, "tag": f"epoch={h['epoch']}", "attack": "train", "ber": h["val_BER"],
                 "L_img": h["L_img"], "L_rec": h["L_rec"], "L_KL": h["L_KL"]} for h in history]
        for attack, r in result["attacks"].items():
            rows.append({"run": cfg.name, "tag": "eval", "attack": attack, **r})
        (scratch / "metrics.csv").write_text(_metrics_csv(rows))
        model.save(scratch / "checkpoint.json")
        report = {"config": cfg.to_dict(), "history": history, **result}
        (scratch / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        epochs = [h["epoch"] for h in history]
        for key in ("L_img", "L_rec", "L_KL", "train_BER", "val_BER"):
            write_plot(scratch / f"loss_{key}.dat", epochs, [h[key] for h in history])
        if out.exists():
            shutil.rmtree(out)
        scratch.rename(out)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    return out


def mean_ber(report: dict, attacks=None) -> float:
    """Mean held-out BER over the evaluation attacks (or a subset)."""
    per = report["attacks"]
    keys = [str(noise.parse_spec(a)) for a in attacks] if attacks else list(per)
    return float(np.mean([per[k]["ber"] for k in keys]))


def sweep_dir_name(beta: float, seed: int) -> str:
    return f"beta={beta:g}_seed={seed}"


def run_sweep(cfg: ExperimentConfig, out_dir=None, log=None) -> Path:
    """One run per (beta, seed); beta = 0 disables the bottleneck.

    Writes ber_vs_beta.dat and rho_vs_beta.dat (seed means, one row per
    beta) plus sweep.json with every run's summary.
    """
    betas = list(cfg.betas) if cfg.betas is not None else list(DEFAULT_SWEEP)
    root = Path(out_dir) if out_dir is not None else cfg.output_root() / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    summary = []
    for beta in betas:
        for seed in cfg.seeds:
            run_cfg = ExperimentConfig(**{**cfg.to_dict(), "logvar_clip": tuple(cfg.logvar_clip)})
            run_cfg.beta = beta
            run_cfg.vib_enabled = beta > 0 and cfg.vib_enabled
            run_cfg.seed = seed
            run_cfg.name = f"{cfg.name}/{sweep_dir_name(beta, seed)}"
            path = run_experiment(run_cfg, root / sweep_dir_name(beta, seed), log)
            report = json.loads((path / "report.json").read_text())
            summary.append({"beta": beta, "seed": seed, "ber": mean_ber(report),
                            "rho": report["interference"]["rho"]["mean"], "dir": path.name})
    ber = [np.mean([s["ber"] for s in summary if s["beta"] == b]) for b in betas]
    rho = [np.mean([s["rho"] for s in summary if s["beta"] == b]) for b in betas]
    write_plot(root / "ber_vs_beta.dat", betas, ber)
    write_plot(root / "rho_vs_beta.dat", betas, rho)
    (root / "sweep.json").write_text(json.dumps({"betas": betas, "seeds": list(cfg.seeds), "runs": summary},
                                                indent=2, sort_keys=True) + "\n")
    return root


def _reduction(a: float, b: float) -> str:
    if a == 0:
        return "n/a"
    return f"{100.0 * (a - b) / a:+.1f}%"


def compare_runs(dir_a, dir_b) -> dict:
    """Per-attack deltas (b - a) of BER and, where measured, rho.

    ``reduction`` is (a - b) / a formatted as a signed percentage, so a
    positive value means run b improved on run a.
    """
    ra = json.loads((Path(dir_a) / "report.json").read_text())
    rb = json.loads((Path(dir_b) / "report.json").read_text())
    ka, kb = set(ra["attacks"]), set(rb["attacks"])
    if ka != kb:
        raise CompareError("runs were evaluated on different attack sets", ka - kb, kb - ka)
    out = {"run_a": str(dir_a), "run_b": str(dir_b), "attacks": {}}
    for k in sorted(ka):
        a, b = ra["attacks"][k], rb["attacks"][k]
        row = {"ber_a": a["ber"], "ber_b": b["ber"], "ber_delta": b["ber"] - a["ber"],
               "ber_reduction": _reduction(a["ber"], b["ber"])}
        if "rho" in a and "rho" in b:
            row.update(rho_a=a["rho"], rho_b=b["rho"], rho_delta=b["rho"] - a["rho"],
                       rho_reduction=_reduction(a["rho"], b["rho"]))
        out["attacks"][k] = row
    ia, ib = ra["interference"]["rho"]["mean"], rb["interference"]["rho"]["mean"]
    out["interference"] = {"rho_a": ia, "rho_b": ib, "rho_delta": ib - ia, "rho_reduction": _reduction(ia, ib)}
    return out
