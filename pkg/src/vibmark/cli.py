"""Command-line entry point: ``python -m vibmark <command>``.

Commands::

    train       --config FILE [--out CKPT] [--run-dir DIR]
    decode      --ckpt CKPT --image PGM
    analyze     --ckpt CKPT [--covers DIR | --n N] [--attack SPEC]
    detect      --ckpt CKPT [--covers DIR | --n N] [--noise-sigma S]
    ib-curve    --joint FILE [--betas B1,B2,... | --beta-max --beta-min --n-betas] [--z-size K]
    mss-verify  --joint FILE
    sweep-beta  --config FILE [--betas ...] [--seeds ...]
    compare     RUN_A RUN_B

Outputs go to stdout (JSON or CSV) unless a path option says otherwise.
File formats are described in FORMATS.md at the repository root.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, experiment, ib, mss, net, noise
from .data import power_law_covers, random_messages, read_pgm, stream, write_pgm
from .info import JointPMF


def _json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _load_covers(args, model: net.WatermarkModel) -> np.ndarray:
    if args.covers:
        paths = sorted(Path(args.covers).glob("*.pgm"))
        if not paths:
            raise SystemExit(f"no .pgm files in {args.covers}")
        imgs = np.stack([read_pgm(p) for p in paths])
        if imgs.shape[1:] != (model.height, model.width):
            raise SystemExit(f"covers are {imgs.shape[1:]}, model expects {(model.height, model.width)}")
        return imgs
    return power_law_covers(args.n, model.height, args.seed, purpose="cli-covers")


def cmd_train(args) -> int:
    cfg = experiment.load_config(args.config)
    if args.run_dir:
        out = experiment.run_experiment(cfg, args.run_dir, log=_progress)
    else:
        out = experiment.run_experiment(cfg, log=_progress)
    if args.out:
        net.WatermarkModel.load(out / "checkpoint.json").save(args.out)
    print(out)
    return 0


def _progress(row) -> None:
    print("epoch {epoch}: L_img={L_img:.3g} L_rec={L_rec:.4f} L_KL={L_KL:.4g} "
          "train_BER={train_BER:.4f} val_BER={val_BER:.4f}".format(**row), file=sys.stderr)


def cmd_decode(args) -> int:
    model = net.WatermarkModel.load(args.ckpt)
    logits, bits = net.decode(model, read_pgm(args.image))
    _json({"logits": logits[0].tolist(), "bits": "".join(str(int(b)) for b in bits[0]),
           "average_logit": float(analysis.average_logits(logits[0]))})
    return 0


def cmd_embed(args) -> int:
    model = net.WatermarkModel.load(args.ckpt)
    bits = np.array([int(c) for c in args.bits], dtype=float)
    x_wm = net.embed(model, read_pgm(args.image), bits[None]).data[0]
    write_pgm(args.out, x_wm)
    return 0


def cmd_analyze(args) -> int:
    model = net.WatermarkModel.load(args.ckpt)
    covers = _load_covers(args, model)
    spec = noise.parse_spec(args.attack)
    msgs = random_messages(stream(args.seed, "cli-messages"), len(covers), model.msg_len)
    x_wm = net.embed(model, covers, msgs).data
    atk = noise.apply(spec, x_wm, covers, stream(args.seed, "cli-attack"))
    reports = analysis.interference_batch(model, covers, msgs, spec, stream(args.seed, "cli-attack"))
    s_wm = x_wm - covers
    out = {
        "attack": str(spec),
        "n_images": len(covers),
        "band_energy": {"covers": analysis.mean_band_energy(covers).as_dict(),
                        "s_atk": analysis.mean_band_energy(atk.s_atk).as_dict(),
                        "s_wm": analysis.mean_band_energy(s_wm).as_dict()},
        "pcc": {
            "s_wm_vs_cover": float(np.mean([analysis.pearson_cc(a, c) for a, c in zip(s_wm, covers)])),
            "s_atk_vs_cover": float(np.mean([analysis.pearson_cc(a, c) for a, c in zip(atk.s_atk, covers)])),
            "s_atk_vs_cover_spectral": float(np.mean(
                [analysis.pearson_cc(a, c, spectral=True) for a, c in zip(atk.s_atk, covers)])),
        },
        "interference": analysis.summarize(reports),
        "ber": net.evaluate_ber(model, covers, msgs, spec, stream(args.seed, "cli-attack")),
    }
    _json(out)
    return 0


def cmd_detect(args) -> int:
    model = net.WatermarkModel.load(args.ckpt)
    covers = _load_covers(args, model)
    if len(covers) < 4:
        raise SystemExit("detection needs at least 4 covers")
    msgs = random_messages(stream(args.seed, "cli-messages"), len(covers), model.msg_len)
    x_wm = net.embed(model, covers, msgs).data
    q = len(covers) // 4
    gauss = noise.parse_spec(f"gaussian(sigma={args.noise_sigma})")
    noised = noise.apply(gauss, x_wm[3 * q:4 * q], covers[3 * q:4 * q], stream(args.seed, "cli-noise")).image.data
    policy = args.threshold if args.threshold is not None else args.policy
    rep = analysis.detection_eval(model, covers[2 * q:3 * q], x_wm[3 * q:4 * q], noised, policy,
                                  calib_clean=covers[:q], calib_wm=x_wm[q:2 * q])
    _json(rep.as_dict())
    return 0


def cmd_ib_curve(args) -> int:
    j = JointPMF.load(args.joint)
    if args.betas:
        betas = sorted(_floats(args.betas), reverse=True)
    else:
        betas = list(np.geomspace(args.beta_max, args.beta_min, args.n_betas))
    points = ib.trace_curve(j, betas, args.z_size, seed=args.seed, restarts=args.restarts)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["beta", "rate", "relevance", "epsilon", "objective", "converged"])
    for p in points:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in p.row()])
    return 0


def cmd_mss_verify(args) -> int:
    j = JointPMF.load(args.joint)
    _json(mss.verify_theorems(j).to_dict())
    return 0


def cmd_sweep(args) -> int:
    cfg = experiment.load_config(args.config)
    if args.betas:
        cfg.betas = _floats(args.betas)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    root = experiment.run_sweep(cfg, args.run_dir, log=_progress)
    print(root)
    return 0


def cmd_compare(args) -> int:
    try:
        _json(experiment.compare_runs(args.run_a, args.run_b))
    except experiment.CompareError as exc:
        _json(exc.as_dict())
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vibmark", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="Distortion grammar:\n" + noise.__doc__.split("::", 1)[1])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train and evaluate one run from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="also copy the checkpoint here")
    s.add_argument("--run-dir", help="run directory (default: <output root>/<run name>)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="decode the message in a PGM image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("embed", help="write a watermarked copy of a PGM image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--bits", required=True, help="message as a 0/1 string")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    for name, func, helptext in (("analyze", cmd_analyze, "spectral, correlation and interference report"),
                                 ("detect", cmd_detect, "average-logit watermark detection report")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--covers", help="directory of .pgm covers (default: synthetic)")
        s.add_argument("--n", type=int, default=200, help="number of synthetic covers")
        s.add_argument("--seed", type=int, default=0)
        s.set_defaults(func=func)
        if name == "analyze":
            s.add_argument("--attack", default="purify(gamma=0.5,sigma=0.02)")
        else:
            s.add_argument("--noise-sigma", type=float, default=0.05)
            s.add_argument("--policy", choices=("midpoint", "eer"), default="midpoint")
            s.add_argument("--threshold", type=float, help="fixed AL threshold (overrides --policy)")

    s = sub.add_parser("ib-curve", help="trace an IB rate-relevance curve as CSV")
    s.add_argument("--joint", required=True, help="joint PMF text file")
    s.add_argument("--betas", help="comma-separated beta values")
    s.add_argument("--beta-max", type=float, default=2.0)
    s.add_argument("--beta-min", type=float, default=0.02)
    s.add_argument("--n-betas", type=int, default=30)
    s.add_argument("--z-size", type=int)
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ib_curve)

    s = sub.add_parser("mss-verify", help="check the sufficiency theorems on a joint PMF")
    s.add_argument("--joint", required=True)
    s.set_defaults(func=cmd_mss_verify)

    s = sub.add_parser("sweep-beta", help="one run per (beta, seed)")
    s.add_argument("--config", required=True)
    s.add_argument("--betas")
    s.add_argument("--seeds")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare", help="per-attack deltas between two runs")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
