"""Diagnostics: spectral bands, correlations, gradient interference and logit detection."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import net


@dataclass(frozen=True)
class BandSpec:
    low_cut: float = 1.0 / 6.0
    mid_cut: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0 < self.low_cut < self.mid_cut <= 0.5:
            raise ValueError("band cuts need 0 < low_cut < mid_cut <= 0.5")


@dataclass
class BandEnergyReport:
    low: float
    mid: float
    high: float

    def as_dict(self):
        return asdict(self)


def radial_frequency(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy ** 2 + fx ** 2)


def power_spectrum(signal) -> np.ndarray:
    """|DFT|^2 / (H W), so the spectrum sums to the spatial sum of squares."""
    x = np.asarray(signal, dtype=float)
    return np.abs(np.fft.fft2(x)) ** 2 / x.size


def band_energy(signal, bands: BandSpec = BandSpec()) -> BandEnergyReport:
    """Fractions of non-DC spectral energy below, between and above the cuts."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 2 or min(x.shape) < 8:
        raise ValueError("band_energy needs a 2-D signal of at least 8x8")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal must be finite")
    p = power_spectrum(x)
    p[0, 0] = 0.0
    total = p.sum()
    if total <= 0:
        raise ValueError("signal has no non-DC energy to apportion")
    r = radial_frequency(*x.shape)
    low = p[r < bands.low_cut].sum() / total
    mid = p[(r >= bands.low_cut) & (r < bands.mid_cut)].sum() / total
    high = p[r >= bands.mid_cut].sum() / total
    return BandEnergyReport(float(low), float(mid), float(high))


def mean_band_energy(signals, bands: BandSpec = BandSpec()) -> BandEnergyReport:
    reps = [band_energy(s, bands) for s in signals]
    return BandEnergyReport(*(float(np.mean([getattr(r, k) for r in reps])) for k in ("low", "mid", "high")))


def pearson_cc(a, b, spectral: bool = False) -> float:
    """Centered Pearson correlation over flattened pixels.

    ``spectral=True`` correlates the 2-D DFT magnitudes instead.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson_cc needs equal-shape inputs with >= 2 elements")
    if spectral:
        a, b = np.abs(np.fft.fft2(a)), np.abs(np.fft.fft2(b))
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("pearson_cc is undefined for zero-variance input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def gradient_projection(s, grad) -> float:
    """Scalar projection of s onto the unit gradient direction."""
    g = np.asarray(grad, dtype=float).ravel()
    n = np.linalg.norm(g)
    if n == 0:
        raise ValueError("gradient is zero")
    return float(np.asarray(s, dtype=float).ravel() @ g / n)


@dataclass
class InterferenceReport:
    proj_wm: float
    proj_atk: float
    rho: float
    cos_wm_atk: float
    eta: float
    effective_proj: float

    def as_dict(self):
        return asdict(self)


def interference_ratio(s_atk, s_wm, grad) -> InterferenceReport:
    """rho = <s_atk, g> / |<s_wm, g>|, plus magnitude ratio and effective projection.

    A positive rho means the attack residual pushes along the loss gradient,
    i.e. it counter-optimises decoding.
    """
    s_atk = np.asarray(s_atk, dtype=float).ravel()
    s_wm = np.asarray(s_wm, dtype=float).ravel()
    p_wm = gradient_projection(s_wm, grad)
    p_atk = gradient_projection(s_atk, grad)
    if p_wm == 0:
        raise ValueError("watermark residual is orthogonal to the gradient; rho undefined")
    eta, cos = effective_terms(s_atk, s_wm)
    return InterferenceReport(p_wm, p_atk, p_atk / abs(p_wm), cos, eta, eta * abs(cos))


def effective_terms(s_atk, s_wm):
    """(eta, cos) with eta = |s_atk| / |s_wm|; cos is 0 when s_atk vanishes."""
    s_atk = np.asarray(s_atk, dtype=float).ravel()
    s_wm = np.asarray(s_wm, dtype=float).ravel()
    n_wm = np.linalg.norm(s_wm)
    if n_wm == 0:
        raise ValueError("watermark residual is zero")
    n_atk = np.linalg.norm(s_atk)
    eta = n_atk / n_wm
    cos = 0.0 if n_atk == 0 else float(np.clip(s_atk @ s_wm / (n_atk * n_wm), -1.0, 1.0))
    return float(eta), cos


def eta_from_psnr(psnr_atk: float, psnr_wm: float) -> float:
    """Magnitude ratio implied by two PSNRs measured against the same reference."""
    return float(10.0 ** ((psnr_wm - psnr_atk) / 20.0))


def decoding_gradient(model: net.WatermarkModel, x_wm, msg) -> np.ndarray:
    """Per-image d BCE(m, logits) / d image at x_wm, through the infer path.

    Images never interact in the network, so one backward pass of the batch
    loss gives every per-image gradient; the factor N undoes the batch mean.
    """
    x = ad.Tensor(np.asarray(x_wm, dtype=float), requires_grad=True)
    logits = net.logits_of(model, x, "infer")
    loss = ad.bce_loss(logits, np.asarray(msg, dtype=float).reshape(logits.shape))
    loss.backward()
    n = logits.shape[0] if logits.data.ndim == 2 else 1
    return x.grad * n


def interference_batch(model: net.WatermarkModel, covers, msgs, spec, rng,
                       batch_size: int = 100) -> list[InterferenceReport]:
    """Per-image interference reports for embed -> attack on a cover set."""
    from . import noise

    covers = np.asarray(covers, dtype=float)
    msgs = np.asarray(msgs, dtype=float)
    reports = []
    for s in range(0, len(covers), batch_size):
        c, m = covers[s:s + batch_size], msgs[s:s + batch_size]
        x_wm = net.embed(model, c, m).data
        s_atk = noise.apply(spec, x_wm, c, rng).s_atk
        grads = decoding_gradient(model, x_wm, m)
        reports.extend(interference_ratio(s_atk[k], x_wm[k] - c[k], grads[k]) for k in range(len(c)))
    return reports


def summarize(reports) -> dict:
    """Mean and sample standard deviation of every report field."""
    keys = list(reports[0].as_dict())
    out = {}
    for k in keys:
        v = np.array([getattr(r, k) for r in reports])
        out[k] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
    return out


def average_logits(logits) -> np.ndarray | float:
    """Mean absolute logit over the last axis."""
    v = np.abs(np.asarray(logits, dtype=float))
    out = v.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class DetectionReport:
    threshold: float
    fp_rate: float
    fn_rate: float
    fn_rate_noised: float
    kl_div_logit_dists: float
    policy: str = "midpoint"

    def as_dict(self):
        return asdict(self)


def _eer_threshold(clean: np.ndarray, wm: np.ndarray) -> float:
    cands = np.unique(np.concatenate([clean, wm]))
    best = None
    for t in cands:
        fp = np.mean(clean > t)
        fn = np.mean(wm <= t)
        key = (abs(fp - fn), fp + fn)
        if best is None or key < best[0]:
            best = (key, t)
    return float(best[1])


def choose_threshold(clean_al, wm_al, policy="midpoint"):
    """Detection cutoff on AL scores; an image is flagged when AL > threshold.

    ``midpoint`` takes the middle of max(clean) and min(watermarked) and falls
    back to the equal-error point when the two overlap. A number is used as is.
    Returns ``(threshold, policy actually applied)``.
    """
    if not isinstance(policy, str):
        return float(policy), "fixed"
    clean_al = np.asarray(clean_al, dtype=float)
    wm_al = np.asarray(wm_al, dtype=float)
    if policy == "midpoint":
        if clean_al.max() < wm_al.min():
            return float(0.5 * (clean_al.max() + wm_al.min())), "midpoint"
        return _eer_threshold(clean_al, wm_al), "eer"
    if policy == "eer":
        return _eer_threshold(clean_al, wm_al), "eer"
    raise ValueError(f"unknown threshold policy {policy!r}")


def histogram_kl(p_samples, q_samples, bins: int = 32) -> float:
    """KL(P || Q) in nats between add-one smoothed histograms on the pooled range."""
    p_samples = np.asarray(p_samples, dtype=float)
    q_samples = np.asarray(q_samples, dtype=float)
    lo = min(p_samples.min(), q_samples.min())
    hi = max(p_samples.max(), q_samples.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hp = np.histogram(p_samples, edges)[0] + 1.0
    hq = np.histogram(q_samples, edges)[0] + 1.0
    hp /= hp.sum()
    hq /= hq.sum()
    return float(np.sum(hp * np.log(hp / hq)))


def detection_from_scores(clean_al, wm_al, noised_al, policy="midpoint",
                          calib_clean=None, calib_wm=None) -> DetectionReport:
    """Detection metrics from AL scores. The threshold is calibrated on the
    calibration scores when given, otherwise on the evaluation scores."""
    clean_al, wm_al, noised_al = (np.asarray(a, dtype=float) for a in (clean_al, wm_al, noised_al))
    if min(clean_al.size, wm_al.size, noised_al.size) == 0:
        raise ValueError("detection sets must be non-empty")
    cc = clean_al if calib_clean is None else np.asarray(calib_clean, dtype=float)
    cw = wm_al if calib_wm is None else np.asarray(calib_wm, dtype=float)
    t, used = choose_threshold(cc, cw, policy)
    return DetectionReport(
        threshold=t,
        fp_rate=float(np.mean(clean_al > t)),
        fn_rate=float(np.mean(wm_al <= t)),
        fn_rate_noised=float(np.mean(noised_al <= t)),
        kl_div_logit_dists=histogram_kl(wm_al, clean_al),
        policy=used,
    )


def al_scores(model: net.WatermarkModel, images) -> np.ndarray:
    logits, _ = net.decode(model, np.asarray(images, dtype=float))
    return average_logits(logits)


def detection_eval(model: net.WatermarkModel, clean_set, wm_set, noised_wm_set, threshold_policy="midpoint",
                   calib_clean=None, calib_wm=None) -> DetectionReport:
    """AL-based presence detection: FP on clean, FN on watermarked and on noised watermarked."""
    if min(len(clean_set), len(wm_set), len(noised_wm_set)) == 0:
        raise ValueError("detection sets must be non-empty")
    return detection_from_scores(
        al_scores(model, clean_set), al_scores(model, wm_set), al_scores(model, noised_wm_set),
        threshold_policy,
        None if calib_clean is None else al_scores(model, calib_clean),
        None if calib_wm is None else al_scores(model, calib_wm),
    )
