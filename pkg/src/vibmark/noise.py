"""Differentiable distortion channels for grayscale image batches.

Every channel maps an ``(N, H, W)`` tensor to a tensor of the same shape.
Random draws (masks, rectangles, noise) are constants on the tape, so the
output is differentiable with respect to the input image.

Config-string grammar (one distortion per string)::

    identity
    gaussian(sigma=0.05)
    dropout(keep=0.65..0.75)
    cropout(ratio=0.25..0.35)
    crop(ratio=0.4..0.55)
    resize(scale=0.4..0.6)
    jpeg(keep_y=25)
    purify(gamma=0.5, sigma=0.02)

``a..b`` is a range; a value is drawn uniformly per image. Aliases:
``gaussian_noise`` for ``gaussian`` and ``purify_proxy`` for ``purify``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# texture modulation of the purification noise, in pixel-intensity units
TEXTURE_FLOOR = 0.01
TEXTURE_REF = 0.05
BLUR_SIGMA = 1.0
BLUR_RADIUS = 2

_PARAMS = {
    "identity": {},
    "gaussian": {"sigma": (0.0, 1.0)},
    "dropout": {"keep": (0.0, 1.0)},
    "cropout": {"ratio": (0.0, 1.0)},
    "crop": {"ratio": (0.0, 1.0)},
    "resize": {"scale": (0.0, 1.0)},
    "jpeg": {"keep_y": (1, 64)},
    "purify": {"gamma": (0.0, 1.0), "sigma": (0.0, 1.0)},
}
_ALIASES = {"gaussian_noise": "gaussian", "purify_proxy": "purify", "noise": "gaussian"}
# probabilities and ratios must be strictly positive; the rest may be zero
_OPEN_LOW = {("dropout", "keep"), ("cropout", "ratio"), ("crop", "ratio"), ("resize", "scale")}

# defaults for the training pool
TABLE8_POOL = (
    "crop(ratio=0.4..0.55)",
    "cropout(ratio=0.25..0.35)",
    "dropout(keep=0.65..0.75)",
    "resize(scale=0.4..0.6)",
    "jpeg(keep_y=25)",
)


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in _PARAMS:
            raise ValueError(f"unknown distortion {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        allowed = _PARAMS[kind]
        params = {}
        for name, val in dict(self.params).items():
            if name not in allowed:
                raise ValueError(f"{kind}: unknown parameter {name!r}")
            lo, hi = (val, val) if np.ndim(val) == 0 else tuple(val)
            lo, hi = float(lo), float(hi)
            if lo > hi:
                raise ValueError(f"{kind}.{name}: empty range {lo}..{hi}")
            amin, amax = allowed[name]
            bad_low = lo <= amin if (kind, name) in _OPEN_LOW else lo < amin
            if bad_low or hi > amax:
                raise ValueError(f"{kind}.{name}={lo}..{hi} outside the valid range")
            params[name] = (lo, hi)
        missing = set(allowed) - set(params)
        if missing:
            raise ValueError(f"{kind}: missing parameter(s) {sorted(missing)}")
        object.__setattr__(self, "params", params)

    def __hash__(self):
        return hash(str(self))

    def __str__(self):
        if not self.params:
            return self.kind

        def fmt(v):
            lo, hi = v
            return f"{lo:g}" if lo == hi else f"{lo:g}..{hi:g}"

        inner = ",".join(f"{k}={fmt(v)}" for k, v in self.params.items())
        return f"{self.kind}({inner})"

    def draw(self, name: str, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = self.params[name]
        if lo == hi:
            return np.full(n, lo)
        return rng.uniform(lo, hi, n)


_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


def parse_spec(text: str) -> DistortionSpec:
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse distortion {text!r}")
    kind, body = m.group(1), m.group(2)
    params = {}
    if body and body.strip():
        for item in body.split(","):
            if "=" not in item:
                raise ValueError(f"expected key=value in {text!r}")
            key, val = (s.strip() for s in item.split("=", 1))
            if ".." in val:
                lo, hi = val.split("..", 1)
                params[key] = (float(lo), float(hi))
            else:
                params[key] = float(val)
    return DistortionSpec(kind, params)


def parse_pool(items) -> list[DistortionSpec]:
    if isinstance(items, str):
        items = _split_top_level(items)
    return [s if isinstance(s, DistortionSpec) else parse_spec(s) for s in items]


def _split_top_level(text: str) -> list[str]:
    """Split on ';' or on commas outside parentheses."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if (ch == ";" or (ch == "," and depth == 0)):
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


@dataclass
class AttackOutcome:
    image: Tensor
    s_atk: np.ndarray


# linear operators ---------------------------------------------------------------

@lru_cache(maxsize=64)
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation from n_in to n_out samples."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def resize_matrix(n: int, scale: float) -> np.ndarray:
    """Down-then-up bilinear resampling of a length-n axis as one matrix."""
    small = max(1, int(round(n * scale)))
    if small == n:
        return np.eye(n)
    return bilinear_matrix(n, small) @ bilinear_matrix(small, n)


@lru_cache(maxsize=16)
def blur_matrix(n: int, sigma: float = BLUR_SIGMA, radius: int = BLUR_RADIUS) -> np.ndarray:
    """Normalised Gaussian blur along one axis with reflect boundaries."""
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for t, wgt in zip(range(-radius, radius + 1), taps):
            j = i + t
            # reflect without repeating the edge sample
            while j < 0 or j >= n:
                j = -j if j < 0 else 2 * (n - 1) - j
            m[i, j] += wgt
    m.setflags(write=False)
    return m


@lru_cache(maxsize=1)
def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


@lru_cache(maxsize=1)
def zigzag_order(n: int = 8) -> list[tuple[int, int]]:
    """(row, col) frequency pairs in JPEG zigzag order."""
    order = []
    for s in range(2 * n - 1):
        diag = [(i, s - i) for i in range(n) if 0 <= s - i < n]
        order.extend(diag if s % 2 else diag[::-1])
    return order


@lru_cache(maxsize=64)
def jpeg_block_operator(keep: int) -> np.ndarray:
    """64x64 map: block -> DCT -> keep first ``keep`` zigzag coefficients -> IDCT."""
    d = dct_matrix(8)
    basis = np.kron(d, d)  # vec(D X D^T) = (D kron D) vec(X) for row-major vec
    mask = np.zeros(64)
    for r, c in zigzag_order(8)[:keep]:
        mask[r * 8 + c] = 1.0
    op = basis.T @ (mask[:, None] * basis)
    op.setflags(write=False)
    return op


def _reflect_pad_matrix(n: int, target: int) -> np.ndarray:
    m = np.zeros((target, n))
    for i in range(target):
        j = i if i < n else 2 * (n - 1) - i
        m[i, abs(j)] = 1.0
    return m


# channels -----------------------------------------------------------------------

def _as_batch(image) -> tuple[Tensor, bool]:
    img = ad.as_tensor(image)
    if img.data.ndim == 2:
        return ad.reshape(img, (1,) + img.shape), True
    if img.data.ndim != 3:
        raise ValueError(f"expected (N, H, W) image batch, got {img.shape}")
    return img, False


def _finish(out: Tensor, src: Tensor, squeeze: bool) -> AttackOutcome:
    out = ad.clip(out, 0.0, 1.0)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
        src_data = src.data[0]
    else:
        src_data = src.data
    return AttackOutcome(out, out.data - src_data)


def _rect_masks(rng, n, h, w, ratios_h, ratios_w):
    masks = np.zeros((n, h, w))
    for k in range(n):
        rh = max(1, int(round(h * ratios_h[k])))
        rw = max(1, int(round(w * ratios_w[k])))
        y0 = rng.integers(0, h - rh + 1)
        x0 = rng.integers(0, w - rw + 1)
        masks[k, y0:y0 + rh, x0:x0 + rw] = 1.0
    return masks


def jpeg_differentiable(image, keep_y: int, rng=None) -> AttackOutcome:
    """Blockwise DCT with all but the first ``keep_y`` zigzag coefficients zeroed."""
    keep_y = int(keep_y)
    if not 1 <= keep_y <= 64:
        raise ValueError("keep_y must lie in [1, 64]")
    x, squeeze = _as_batch(image)
    out = _jpeg(x, keep_y)
    return _finish(out, x, squeeze)


def _jpeg(x: Tensor, keep_y: int) -> Tensor:
    n, h, w = x.shape
    hp, wp = -(-h // 8) * 8, -(-w // 8) * 8
    y = x
    if (hp, wp) != (h, w):
        y = ad.linear2d(y, _reflect_pad_matrix(h, hp), _reflect_pad_matrix(w, wp))
    blocks = ad.transpose(ad.reshape(y, (n, hp // 8, 8, wp // 8, 8)), (0, 1, 3, 2, 4))
    flat = ad.reshape(blocks, (n, hp // 8, wp // 8, 64))
    coded = ad.matmul(flat, jpeg_block_operator(keep_y).T)
    back = ad.transpose(ad.reshape(coded, (n, hp // 8, wp // 8, 8, 8)), (0, 1, 3, 2, 4))
    y = ad.reshape(back, (n, hp, wp))
    if (hp, wp) != (h, w):
        y = ad.linear2d(y, np.eye(hp)[:h], np.eye(wp)[:w])
    return y


def highpass(x: Tensor) -> Tensor:
    """x minus its radius-2 Gaussian blur."""
    h, w = x.shape[-2:]
    return ad.sub(x, ad.linear2d(x, blur_matrix(h), blur_matrix(w)))


def purify_proxy(image, gamma: float, sigma: float, rng: np.random.Generator) -> AttackOutcome:
    """Content-adaptive erasure: subtract a fraction of the high-pass band and
    add noise whose amplitude follows local texture.

    s_atk = -gamma * highpass(x) + sigma * noise * sqrt(highpass(x)^2 + floor^2) / ref
    """
    if not 0.0 <= gamma <= 1.0 or sigma < 0:
        raise ValueError("purify needs gamma in [0, 1] and sigma >= 0")
    x, squeeze = _as_batch(image)
    gammas = np.full(x.shape[0], float(gamma))
    sigmas = np.full(x.shape[0], float(sigma))
    out = _purify(x, gammas, sigmas, rng)
    return _finish(out, x, squeeze)


def _per_image(values: np.ndarray, shape) -> np.ndarray:
    return np.broadcast_to(values[:, None, None], shape).copy()


def _purify(x: Tensor, gammas, sigmas, rng) -> Tensor:
    if not np.any(gammas) and not np.any(sigmas):
        return x
    hp = highpass(x)
    out = ad.sub(x, ad.mul(hp, _per_image(gammas, x.shape)))
    if np.any(sigmas):
        noise = rng.standard_normal(x.shape)
        amp = ad.mul(ad.sqrt(ad.add(ad.mul(hp, hp), TEXTURE_FLOOR ** 2)), 1.0 / TEXTURE_REF)
        out = ad.add(out, ad.mul(amp, _per_image(sigmas, x.shape) * noise))
    return out


def apply(spec: DistortionSpec | str, image, cover=None, rng: np.random.Generator | None = None) -> AttackOutcome:
    """Run one distortion on an image batch.

    ``cover`` supplies the unwatermarked pixels mixed back in by dropout and
    cropout. Parameters given as ranges are drawn per image from ``rng``.
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    rng = np.random.default_rng(0) if rng is None else rng
    x, squeeze = _as_batch(image)
    n, h, w = x.shape
    kind = spec.kind

    if kind == "identity":
        out = x
    elif kind == "gaussian":
        sig = spec.draw("sigma", rng, n)
        out = ad.add(x, _per_image(sig, x.shape) * rng.standard_normal(x.shape))
    elif kind in ("dropout", "cropout"):
        if cover is None:
            raise ValueError(f"{kind} needs the cover image")
        cov = np.asarray(getattr(cover, "data", cover), dtype=float).reshape(x.shape)
        if kind == "dropout":
            keep = spec.draw("keep", rng, n)
            mask = (rng.random(x.shape) < keep[:, None, None]).astype(float)
        else:
            ratio = spec.draw("ratio", rng, n)
            mask = _rect_masks(rng, n, h, w, ratio, ratio)
        out = ad.add(ad.mul(x, mask), (1.0 - mask) * cov)
    elif kind == "crop":
        ratio = spec.draw("ratio", rng, n)
        out = ad.mul(x, _rect_masks(rng, n, h, w, ratio, ratio))
    elif kind == "resize":
        scales = spec.draw("scale", rng, n)
        if np.all(scales == scales[0]):
            out = ad.linear2d(x, resize_matrix(h, float(scales[0])), resize_matrix(w, float(scales[0])))
        else:
            parts = [ad.linear2d(ad.reshape(_row(x, k), (1, h, w)),
                                 resize_matrix(h, float(s)), resize_matrix(w, float(s)))
                     for k, s in enumerate(scales)]
            out = ad.concat(parts, axis=0)
    elif kind == "jpeg":
        lo, hi = spec.params["keep_y"]
        keep = int(round(rng.uniform(lo, hi))) if lo != hi else int(lo)
        out = _jpeg(x, keep)
    elif kind == "purify":
        out = _purify(x, spec.draw("gamma", rng, n), spec.draw("sigma", rng, n), rng)
    else:  # pragma: no cover - guarded by DistortionSpec
        raise ValueError(kind)
    return _finish(out, x, squeeze)


def _row(x: Tensor, k: int) -> Tensor:
    """Select image k of a batch as a differentiable slice."""
    n = x.shape[0]
    sel = np.zeros((1, n))
    sel[0, k] = 1.0
    flat = ad.reshape(x, (n, -1))
    return ad.linear2d(flat, sel, None)
