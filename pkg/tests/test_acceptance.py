"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a one-line verdict that conftest prints in the terminal
summary. Criteria 6, 7, 8 and 11 share one beta sweep driven by
tests/acceptance.ini (12 training runs, over an hour on one core). Its
output is cached under runs/ keyed by a hash of the config and the package
sources, so the sweep is recomputed whenever either changes. Set
VIBMARK_ACCEPTANCE_DIR to put the cache elsewhere.
"""
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from vibmark import analysis, experiment, ib, mss, net, noise
from vibmark import autodiff as ad
from vibmark.autodiff import Tensor
from vibmark.cli import main
from vibmark.data import power_law_covers, psnr, stream
from vibmark.info import (JointPMF, apply_statistic, conditional_mutual_information, mutual_information,
                          random_joint, three_way)

HERE = Path(__file__).parent
REPO = HERE.parent
INI = HERE / "acceptance.ini"
PURIFY = "purify(gamma=0.5,sigma=0.02)"


@pytest.fixture
def verdict(request):
    """Call with (criterion number, ok, detail); stores the line for the summary."""
    def record(n, ok, detail=""):
        request.config._acceptance.append((n, bool(ok), detail))
        return ok
    return record


# 1 ---------------------------------------------------------------------------

def handcrafted_channels():
    dup = JointPMF(np.array([[0.1, 0.1, 0.2, 0.0], [0.05, 0.05, 0.1, 0.4]]))
    return [mss.four_symbol_channel(), mss.copy_channel(), mss.independent_channel(3, 4),
            mss.planted_joint(np.random.default_rng(7), 3, 6, 2), dup]


def test_criterion_01_sufficiency_theorems(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    joints = [random_joint(rng, int(rng.integers(2, 4)), int(rng.integers(2, 7))) for _ in range(100)]
    joints += handcrafted_channels()
    reports = [mss.verify_theorems(j, tol=1e-9) for j in joints]
    checked = [r for r in reports if not r.flagged]
    failures = sum(not (r.theorem2_holds and r.theorem3_holds) for r in checked)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and len(checked) >= 100 and elapsed < 30
    verdict(1, ok, f"{len(checked)}/{len(reports)} unflagged joints, {failures} failures, {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_criterion_02_chain_rule_and_dpi(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_chain, worst_dpi = 0.0, 0.0
    for _ in range(1000):
        j = random_joint(rng, int(rng.integers(2, 5)), int(rng.integers(2, 8)))
        t = rng.integers(0, j.x_size, j.x_size)
        t = np.unique(t, return_inverse=True)[1]
        i_mx = mutual_information(j)
        i_mt = mutual_information(apply_statistic(j, t))
        i_mx_t = conditional_mutual_information(three_way(j, t))
        worst_chain = max(worst_chain, abs(i_mx - i_mt - i_mx_t))
        worst_dpi = max(worst_dpi, i_mt - i_mx)
    elapsed = time.perf_counter() - t0
    ok = worst_chain <= 1e-12 and worst_dpi <= 1e-12 and elapsed < 10
    verdict(2, ok, f"max chain gap {worst_chain:.2e}, max DPI excess {worst_dpi:.2e}, {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_03_ib_curve_geometry(verdict):
    t0 = time.perf_counter()
    betas = np.geomspace(2.0, 0.02, 40)
    rng = np.random.default_rng(2024)
    channels = [(mss.four_symbol_channel(), True)]
    channels += [(random_joint(rng, int(rng.integers(2, 4)), int(rng.integers(3, 7))), False) for _ in range(10)]
    bad, worst, n_slopes = [], 0.0, 0
    for k, (j, degenerate) in enumerate(channels):
        pts = ib.trace_curve(j, betas, seed=k, restarts=3)
        rep = ib.check_curve_geometry(pts, slope_tol=0.15, tol=1e-6, allow_degenerate=degenerate)
        if rep.slope_errors:
            worst = max(worst, max(rep.slope_errors))
            n_slopes += len(rep.slope_errors)
        if not (rep.monotone and rep.convex) or any(e >= 0.15 for e in rep.slope_errors):
            bad.append(k)
        if not degenerate and not rep.slope_errors:
            bad.append(k)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 60
    verdict(3, ok, f"{len(channels)} curves x {len(betas)} betas, bad={bad}, "
                   f"worst slope error {worst:.3f} over {n_slopes} points, {elapsed:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_criterion_04_solver_matches_mss_oracle(verdict):
    t0 = time.perf_counter()
    j = mss.four_symbol_channel()
    _, p = ib.solve_ib(j, 1e-3)
    oracle = mss.verify_theorems(j)
    elapsed = time.perf_counter() - t0
    rel_gap = abs(p.relevance - mutual_information(j))
    rate_gap = abs(p.rate - math.log(2))
    ok = rel_gap <= 1e-6 and rate_gap <= 1e-4 and abs(oracle.rate - math.log(2)) <= 1e-12 and elapsed < 5
    verdict(4, ok, f"relevance gap {rel_gap:.1e}, rate gap {rate_gap:.1e}, {elapsed:.2f}s")
    assert ok


# 5 ---------------------------------------------------------------------------

def _primitive_checks():
    rng = np.random.default_rng(5)

    def leaf(*shape, lo=-1.0, hi=1.0):
        return ad.parameter(rng.uniform(lo, hi, size=shape))

    def weighted(f, *leaves):
        w = np.random.default_rng(9).normal(size=f(*[Tensor(t.data) for t in leaves]).shape)
        return ad.grad_check(lambda *t: ad.sum(ad.mul(f(*t), w)), list(leaves))

    car = rng.choice([-1.0, 1.0], size=(4, 5, 3))
    target = rng.integers(0, 2, (3, 4)).astype(float)
    left, right = rng.normal(size=(5, 3)), rng.normal(size=(6, 4))
    # keep pixels off the [0, 1] clip so central differences stay smooth
    cover = 0.1 + 0.8 * power_law_covers(2, 16, seed=3)
    out = {
        "add": weighted(ad.add, leaf(3, 4), leaf(3, 4)),
        "sub": weighted(ad.sub, leaf(3, 4), leaf(3, 4)),
        "mul": weighted(ad.mul, leaf(3, 4), leaf(3, 4)),
        "relu": weighted(ad.relu, leaf(3, 4, lo=0.1)),
        "sigmoid": weighted(ad.sigmoid, leaf(3, 4)),
        "tanh": weighted(ad.tanh, leaf(3, 4)),
        "exp": weighted(ad.exp, leaf(3, 4)),
        "log": weighted(ad.log, leaf(3, 4, lo=0.2, hi=2.0)),
        "sqrt": weighted(ad.sqrt, leaf(3, 4, lo=0.2, hi=2.0)),
        "clip": weighted(lambda x: ad.clip(x, -0.5, 0.5), leaf(3, 4, lo=-0.4, hi=0.4)),
        "sum": weighted(lambda x: ad.sum(x, axis=1), leaf(3, 4)),
        "mean": weighted(lambda x: ad.mean(x, axis=0), leaf(3, 4)),
        "reshape": weighted(lambda x: ad.reshape(x, (6, 2)), leaf(3, 4)),
        "transpose": weighted(lambda x: ad.transpose(x, (1, 0)), leaf(3, 4)),
        "concat": weighted(lambda a, b: ad.concat([a, b], axis=1), leaf(2, 3), leaf(2, 5)),
        "matmul": weighted(ad.matmul, leaf(2, 3, 4), leaf(4, 5)),
        "add_bias": weighted(ad.add_bias, leaf(2, 3, 4), leaf(4)),
        "linear2d": weighted(lambda x: ad.linear2d(x, left, right), leaf(2, 3, 4)),
        "conv2d": weighted(ad.conv2d, leaf(2, 4, 5, 2), leaf(3, 3, 2, 3), leaf(3)),
        "conv2d_mean": weighted(ad.conv2d_mean, leaf(2, 4, 5, 2), leaf(3, 3, 2, 3), leaf(3)),
        "conv2d_modulated_planes": weighted(lambda v, w: ad.conv2d_modulated_planes(v, car, w),
                                            leaf(2, 3), leaf(3, 3, 3, 2)),
        "conv2d_constant_planes": weighted(lambda v, w: ad.conv2d_constant_planes(v, w, 4, 5),
                                           leaf(2, 3), leaf(3, 3, 3, 2)),
        "bce_loss": ad.grad_check(lambda z: ad.bce_loss(z, target), leaf(3, 4, lo=-3, hi=3)),
        "mse_loss": ad.grad_check(lambda a, b: ad.mse_loss(a, b), [leaf(3, 4), leaf(3, 4)]),
        "gaussian_kl": ad.grad_check(lambda a, b: ad.gaussian_kl(a, b), [leaf(3, 4), leaf(3, 4)]),
    }
    for spec in ("gaussian(sigma=0.05)", "dropout(keep=0.7)", "cropout(ratio=0.3)", "crop(ratio=0.5)",
                 "resize(scale=0.5)", "jpeg(keep_y=25)", PURIFY):
        parsed = noise.parse_spec(spec)
        x = ad.parameter(cover.copy())
        w = np.random.default_rng(4).normal(size=cover.shape)
        out[spec] = ad.grad_check(
            lambda t: ad.sum(ad.mul(noise.apply(parsed, t, cover, stream(0, "fd")).image, w)),
            x, indices=np.arange(0, x.size, 7))
    return out


def test_criterion_05_gradients(verdict):
    t0 = time.perf_counter()
    prim = _primitive_checks()
    m = net.init_model(4, 8, net.VIBConfig(alpha=0.007, beta=1e-3, latent_dim=6), seed=1,
                       channels=4, feat_dim=8, zero_encoder=False)
    covers = power_law_covers(2, 8, seed=2)
    msgs = np.array([[1, 0, 1, 1], [0, 0, 1, 0]], dtype=float)
    names = sorted(m.params)
    leaves = [m.params[k] for k in names]
    e2e = ad.grad_check(
        lambda *_: net.total_loss(m, covers, msgs, PURIFY, np.random.default_rng(5), 1.0, 1.0).total,
        leaves, indices=[np.arange(0, p.size, max(1, p.size // 6)) for p in leaves])
    elapsed = time.perf_counter() - t0
    worst_name = max(prim, key=prim.get)
    ok = max(prim.values()) < 1e-4 and e2e < 1e-3 and elapsed < 60
    verdict(5, ok, f"{len(prim)} primitives, worst {worst_name} {prim[worst_name]:.1e}; "
                   f"end-to-end {e2e:.1e}; {elapsed:.1f}s")
    assert ok


# 9, 10 -------------------------------------------------------------------------

def _residual_at_psnr(rng, shape, db):
    r = rng.normal(size=shape)
    return r * (10 ** (-db / 20.0)) / np.sqrt(np.mean(r ** 2))


def test_criterion_09_eta_arithmetic(verdict):
    rng = np.random.default_rng(9)
    cover = power_law_covers(1, 32, seed=9)[0] * 0.5 + 0.25
    s_wm = _residual_at_psnr(rng, cover.shape, 40.0)
    s_atk = _residual_at_psnr(rng, cover.shape, 28.0)
    measured = (psnr(cover, cover + s_wm), psnr(cover, cover + s_atk))
    eta, cos = analysis.effective_terms(s_atk, s_wm)
    eta_psnr = analysis.eta_from_psnr(*reversed(measured))
    target = 10 ** ((40 - 28) / 20)
    ok = abs(eta - target) <= 1e-3 and abs(eta_psnr - target) <= 1e-3
    verdict(9, ok, f"eta {eta:.6f} (from PSNRs {eta_psnr:.6f}) vs {target:.6f}, cos {cos:+.3f}")
    assert ok


def test_criterion_10_purify_signature(verdict):
    t0 = time.perf_counter()
    covers = power_law_covers(100, 32, seed=10, purpose="acceptance-covers")
    out = noise.apply(noise.parse_spec(PURIFY), covers, covers, stream(10, "purify"))
    pcc = float(np.mean([analysis.pearson_cc(a, c) for a, c in zip(out.s_atk, covers)]))
    e_atk, e_cov = analysis.mean_band_energy(out.s_atk), analysis.mean_band_energy(covers)
    hi_atk, hi_cov = e_atk.mid + e_atk.high, e_cov.mid + e_cov.high
    elapsed = time.perf_counter() - t0
    ok = pcc < 0 and hi_atk > hi_cov and elapsed < 30
    verdict(10, ok, f"PCC {pcc:+.3f}; mid+high s_atk {hi_atk:.3f} vs covers {hi_cov:.3f}; {elapsed:.1f}s")
    assert ok


# sweep-backed criteria -------------------------------------------------------

def _cache_key() -> str:
    h = hashlib.sha256(INI.read_bytes())
    for path in sorted((REPO / "src" / "vibmark").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def sweep():
    cfg = experiment.load_config(INI)
    base = Path(os.environ.get("VIBMARK_ACCEPTANCE_DIR", REPO / "runs"))
    root = base / f"acceptance-{_cache_key()}"
    t0 = time.perf_counter()
    if not (root / "sweep.json").exists():
        experiment.run_sweep(cfg, root)
    summary = json.loads((root / "sweep.json").read_text())
    runs = {}
    for r in summary["runs"]:
        runs[(r["beta"], r["seed"])] = {"dir": root / r["dir"], "ber": r["ber"],
                                        "report": json.loads((root / r["dir"] / "report.json").read_text())}
    mean_ber = {b: float(np.mean([runs[(b, s)]["ber"] for s in summary["seeds"]])) for b in summary["betas"]}
    vib_betas = [b for b in summary["betas"] if b > 0]
    best = min(vib_betas, key=mean_ber.get)
    return {"cfg": cfg, "root": root, "runs": runs, "betas": summary["betas"], "seeds": summary["seeds"],
            "mean_ber": mean_ber, "best": best, "seconds": time.perf_counter() - t0}


def _seed_mean(sw, beta, fn):
    return float(np.mean([fn(sw["runs"][(beta, s)]["report"]) for s in sw["seeds"]]))


def test_criterion_06_beta_sweet_spot(sweep, verdict):
    ber = sweep["mean_ber"]
    ok = ber[1.5e-4] < ber[0.0] and ber[1e-3] > ber[1.5e-4]
    table = ", ".join(f"{b:g}: {v:.4f}" for b, v in ber.items())
    verdict(6, ok, f"mean BER by beta {{{table}}} over seeds {sweep['seeds']}")
    assert ok


def test_criterion_07_interference_reduction(sweep, verdict):
    rho = lambda rep: rep["interference"]["rho"]["mean"]  # noqa: E731
    base, best = _seed_mean(sweep, 0.0, rho), _seed_mean(sweep, sweep["best"], rho)
    ok = best < base
    verdict(7, ok, f"mean rho under {PURIFY}: baseline {base:+.4f}, beta={sweep['best']:g} {best:+.4f}")
    assert ok


def test_criterion_08_gradient_signs(sweep, verdict):
    reps = [sweep["runs"][(0.0, s)]["report"] for s in sweep["seeds"]]
    n = sweep["cfg"].n_interference
    p_wm = float(np.mean([r["interference"]["proj_wm"]["mean"] for r in reps]))
    p_atk = float(np.mean([r["interference"]["proj_atk"]["mean"] for r in reps]))
    ok = p_wm < 0 < p_atk and n * len(reps) >= 200
    verdict(8, ok, f"baseline over {n * len(reps)} images: proj_wm {p_wm:+.3e}, proj_atk {p_atk:+.3e}")
    assert ok


def test_criterion_11_detection(sweep, verdict):
    best = sweep["best"]
    det = {b: [sweep["runs"][(b, s)]["report"]["detection"] for s in sweep["seeds"]] for b in (0.0, best)}
    clean_ok = all(d["fp_rate"] == 0 and d["fn_rate"] == 0 for ds in det.values() for d in ds)
    fn = {b: float(np.mean([d["fn_rate_noised"] for d in ds])) for b, ds in det.items()}
    kl = {b: float(np.mean([d["kl_div_logit_dists"] for d in ds])) for b, ds in det.items()}
    ok = clean_ok and fn[best] <= fn[0.0] and kl[best] >= kl[0.0]
    verdict(11, ok, f"FP=FN=0 on all: {clean_ok}; fn_noised {fn[0.0]:.3f} -> {fn[best]:.3f}; "
                    f"KL {kl[0.0]:.3f} -> {kl[best]:.3f} (beta={best:g})")
    assert ok


def test_acceptance_models_meet_quality_bars(sweep):
    worst_psnr = min(r["report"]["attacks"]["identity"]["psnr"] for r in sweep["runs"].values())
    clean = sweep["runs"][(1.5e-4, 0)]["report"]["attacks"]["identity"]["ber"]
    assert worst_psnr >= 30.0
    assert clean < 0.05


def test_acceptance_training_loss_falls_early(sweep):
    for (beta, _), run in sweep["runs"].items():
        h = run["report"]["history"][:5]
        total = [r["L_img"] + r["L_rec"] + beta * r["L_KL"] for r in h]
        assert all(b < a for a, b in zip(total, total[1:])), (beta, total)


def test_acceptance_vib_beats_baseline_under_purification(sweep):
    deltas = [experiment.compare_runs(sweep["runs"][(0.0, s)]["dir"],
                                      sweep["runs"][(sweep["best"], s)]["dir"])["attacks"][PURIFY]["ber_delta"]
              for s in sweep["seeds"]]
    assert np.mean(deltas) < 0


def test_acceptance_watermarked_logits_exceed_clean(sweep):
    cfg = sweep["cfg"]
    covers, msgs = experiment.held_out_set(experiment.ExperimentConfig(**{**cfg.to_dict(), "n_test": 100}))
    for beta in (0.0, sweep["best"]):
        model = net.WatermarkModel.load(sweep["runs"][(beta, 0)]["dir"] / "checkpoint.json")
        x_wm = net.embed(model, covers, msgs).data
        assert analysis.al_scores(model, x_wm).mean() > analysis.al_scores(model, covers).mean()


# 12 --------------------------------------------------------------------------

def _short_config():
    cfg = experiment.load_config(INI)
    cfg.epochs, cfg.n_covers, cfg.n_test, cfg.n_interference = 1, 160, 40, 20
    return cfg


def test_criterion_12_determinism(tmp_path, capsys, verdict):
    cfg = _short_config()
    cfg.betas = [0.0, 1.5e-4]
    a = experiment.run_sweep(cfg, tmp_path / "a")
    b = experiment.run_sweep(cfg, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    assert sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file()) == files

    j = tmp_path / "joint.txt"
    random_joint(np.random.default_rng(12), 3, 5).save(j)
    outputs = []
    for _ in range(2):
        main(["ib-curve", "--joint", str(j), "--n-betas", "12"])
        main(["mss-verify", "--joint", str(j)])
        outputs.append(capsys.readouterr().out)
    ok = not differing and outputs[0] == outputs[1] and len(files) >= 10
    verdict(12, ok, f"{len(files)} sweep files byte-identical across reruns; differing={differing}; "
                    f"CLI outputs identical: {outputs[0] == outputs[1]}")
    assert ok
