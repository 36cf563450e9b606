"""Toy watermark encoder/decoder with a stochastic bottleneck.

Data flow for one batch::

    cover, bits -> encoder residual r -> x_wm = clip(cover + r, 0, 1)
    x_wm -> distortion -> extractor -> Z (64 features)
    Z -> mu head, log-variance head -> U = mu + alpha * eps * exp(logvar / 2)
    U -> linear readout -> L logits

Activations are channels-last: images enter the convolutions as (N, H, W, 1).

Bit b enters the encoder as a plane (2 * bit - 1) * C_b. With the default
``carrier_block > 0``, C_b is a fixed +-1 Walsh-Hadamard pattern made of
``carrier_block``-pixel squares, and the extractor pools its last conv layer
against the same patterns (Z[f, k] = mean over pixels of h[f] * C_k). With
``carrier_block = 0`` every C_b is all ones and Z is the plain spatial mean of
the last conv layer; that variant has no positional reference on either side
and barely trains at 32x32.

With ``residual_bound = b > 0`` the last encoder layer passes through
b * tanh, so |r| <= b per pixel and PSNR(cover, x_wm) >= -20 log10(b). The
image loss then only shapes the residual inside that budget instead of
having to hold it down from the start, which otherwise shrinks the residual
to nothing before the extractor learns to read it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import hadamard

from . import autodiff as ad
from . import noise
from .autodiff import Tensor
from .data import random_messages, stream


@dataclass
class VIBConfig:
    alpha: float = 0.007
    beta: float = 1.5e-4
    latent_dim: int = 32
    logvar_clip: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.latent_dim < 1:
            raise ValueError("VIBConfig needs alpha >= 0, beta >= 0, latent_dim >= 1")
        self.logvar_clip = tuple(float(v) for v in self.logvar_clip)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_img: float = 1.0
    lambda_rec: float = 1.0
    seed: int = 0
    pool: list = field(default_factory=lambda: list(noise.TABLE8_POOL))
    val_pool: list | None = None
    vib_enabled: bool = True
    val_fraction: float = 0.1
    img_warmup: int = 0
    lambda_img_start: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.img_warmup < 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.lambda_img < 0 or self.lambda_rec < 0:
            raise ValueError("learning rate and loss weights must be non-negative")
        self.pool = noise.parse_pool(self.pool)
        if self.val_pool is not None:
            self.val_pool = noise.parse_pool(self.val_pool)


class WatermarkModel:
    """Weights plus the bottleneck configuration."""

    def __init__(self, params: dict, vib: VIBConfig, msg_len: int, height: int, width: int,
                 channels: int = 16, feat_dim: int = 64, seed: int = 0, carrier_block: int = 2,
                 residual_bound: float = 0.028):
        self.params = params
        self.vib = vib
        self.msg_len = msg_len
        self.height = height
        self.width = width
        self.channels = channels
        self.feat_dim = feat_dim
        self.seed = seed
        self.carrier_block = carrier_block
        self.residual_bound = residual_bound
        self.carriers = carrier_bank(height, width, msg_len, carrier_block)

    @property
    def pool_channels(self) -> int:
        return self.feat_dim // self.msg_len if self.carrier_block else self.feat_dim

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def header(self) -> dict:
        return {"L": self.msg_len, "H": self.height, "W": self.width, "D": self.vib.latent_dim,
                "alpha": self.vib.alpha, "beta": self.vib.beta, "logvar_clip": list(self.vib.logvar_clip),
                "seed": self.seed, "channels": self.channels, "feat_dim": self.feat_dim,
                "carrier_block": self.carrier_block, "residual_bound": self.residual_bound}

    def save(self, path) -> None:
        ad.save_params(path, self.params, self.header())

    @classmethod
    def load(cls, path) -> "WatermarkModel":
        params, h = ad.load_params(path)
        vib = VIBConfig(h["alpha"], h["beta"], h["D"], tuple(h["logvar_clip"]))
        return cls(params, vib, h["L"], h["H"], h["W"], h.get("channels", 16), h.get("feat_dim", 64), h["seed"],
                   h["carrier_block"], h["residual_bound"])

    def copy(self) -> "WatermarkModel":
        params = {k: ad.parameter(p.data.copy()) for k, p in self.params.items()}
        return WatermarkModel(params, VIBConfig(**asdict(self.vib)), self.msg_len, self.height, self.width,
                              self.channels, self.feat_dim, self.seed, self.carrier_block, self.residual_bound)


def _sequency(rows: np.ndarray) -> np.ndarray:
    return np.sum(rows[:, 1:] != rows[:, :-1], axis=1)


def carrier_bank(height: int, width: int, n: int, block: int) -> np.ndarray:
    """(H, W, n) fixed message carriers.

    ``block = 0`` gives all-ones planes. Otherwise each carrier is a separable
    2-D Walsh pattern on a grid of ``block``-pixel squares. The n patterns with
    the most sign changes along both axes are used: they are +-1 valued,
    zero-mean and mutually orthogonal, and sit away from the low frequencies
    where natural-looking covers keep most of their energy.
    """
    if block == 0:
        return np.ones((height, width, n))
    if height % block or width % block:
        raise ValueError(f"carrier block {block} does not divide {height}x{width}")
    gh, gw = height // block, width // block
    if gh & (gh - 1) or gw & (gw - 1):
        raise ValueError(f"carrier grid {gh}x{gw} must have power-of-two sides")
    wy, wx = hadamard(gh).astype(float), hadamard(gw).astype(float)
    sy, sx = _sequency(wy), _sequency(wx)
    pairs = [(b, a) for b in range(gh) for a in range(gw) if a or b]
    pairs.sort(key=lambda p: (-min(sy[p[0]], sx[p[1]]), -(sy[p[0]] + sx[p[1]]), p))
    if len(pairs) < n:
        raise ValueError(f"a {gh}x{gw} carrier grid cannot hold {n} orthogonal carriers")
    grid = np.stack([np.outer(wy[b], wx[a]) for b, a in pairs[:n]])
    return np.kron(grid, np.ones((block, block))).transpose(1, 2, 0).copy()


def init_model(msg_len: int = 16, size: int = 32, vib: VIBConfig | None = None, seed: int = 0,
               channels: int = 16, feat_dim: int = 64, zero_encoder: bool = True,
               carrier_block: int = 2, residual_bound: float = 0.028) -> WatermarkModel:
    """He-initialised weights. The last encoder layer starts at zero, so an
    untrained model embeds nothing (x_wm == cover)."""
    vib = vib or VIBConfig()
    if carrier_block and feat_dim % msg_len:
        raise ValueError("feat_dim must be a multiple of msg_len when carriers are used")
    rng = stream(seed, "weights")
    c, d = channels, vib.latent_dim
    f = feat_dim // msg_len if carrier_block else feat_dim

    def conv(cin, cout, fan_in=None):
        fan = 9 * (fan_in or cin)
        return rng.normal(0.0, math.sqrt(2.0 / fan), (3, 3, cin, cout))

    def dense(fin, fout, gain=1.0):
        return rng.normal(0.0, gain / math.sqrt(fin), (fin, fout))

    raw = {
        "enc1.w_img": conv(1, c, 1 + msg_len),
        "enc1.w_msg": conv(msg_len, c, 1 + msg_len),
        "enc1.b": np.zeros(c),
        "enc2.w": conv(c, c),
        "enc2.b": np.zeros(c),
        "enc3.w": np.zeros((3, 3, c, 1)) if zero_encoder else conv(c, 1) * 0.1,
        "enc3.b": np.zeros(1),
        "ext1.w": conv(1, c),
        "ext1.b": np.zeros(c),
        "ext2.w": conv(c, c),
        "ext2.b": np.zeros(c),
        "ext3.w": conv(c, f),
        "ext3.b": np.zeros(f),
        "mu.w": dense(feat_dim, d),
        "mu.b": np.zeros(d),
        "logvar.w": dense(feat_dim, d, 0.01),
        "logvar.b": np.zeros(d),
        "dec.w": dense(d, msg_len),
        "dec.b": np.zeros(msg_len),
    }
    params = {k: ad.parameter(v) for k, v in raw.items()}
    return WatermarkModel(params, vib, msg_len, size, size, channels, feat_dim, seed, carrier_block, residual_bound)


def _images(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def residual(model: WatermarkModel, cover, msg) -> Tensor:
    x = _images(cover)
    n, h, w = x.shape
    bits = np.asarray(msg, dtype=float).reshape(n, -1)
    if bits.shape[1] != model.msg_len:
        raise ValueError(f"message length {bits.shape[1]} != model L={model.msg_len}")
    if (h, w) != (model.height, model.width):
        raise ValueError(f"image {h}x{w} != model {model.height}x{model.width}")
    signs = ad.Tensor(2.0 * bits - 1.0)
    x4 = ad.reshape(x, (n, h, w, 1))
    if model.carrier_block:
        planes = ad.conv2d_modulated_planes(signs, model.carriers, model["enc1.w_msg"])
    else:
        planes = ad.conv2d_constant_planes(signs, model["enc1.w_msg"], h, w)
    h1 = ad.add(ad.conv2d(x4, model["enc1.w_img"], model["enc1.b"]), planes)
    h1 = ad.relu(h1)
    h2 = ad.relu(ad.conv2d(h1, model["enc2.w"], model["enc2.b"]))
    r = ad.conv2d(h2, model["enc3.w"], model["enc3.b"])
    if model.residual_bound:
        r = ad.mul(ad.tanh(r), model.residual_bound)
    return ad.reshape(r, (n, h, w))


def embed(model: WatermarkModel, cover, msg) -> Tensor:
    """Watermarked batch x_wm = clip(cover + encoder residual, 0, 1)."""
    x = _images(cover)
    return ad.clip(ad.add(x, residual(model, x, msg)), 0.0, 1.0)


def extract(model: WatermarkModel, image) -> Tensor:
    """Backbone features Z, shape (N, feat_dim)."""
    x = _images(image)
    n, h, w = x.shape
    x4 = ad.reshape(x, (n, h, w, 1))
    h1 = ad.relu(ad.conv2d(x4, model["ext1.w"], model["ext1.b"]))
    h2 = ad.relu(ad.conv2d(h1, model["ext2.w"], model["ext2.b"]))
    if not model.carrier_block:
        return ad.conv2d_mean(h2, model["ext3.w"], model["ext3.b"])
    h3 = ad.conv2d(h2, model["ext3.w"], model["ext3.b"])
    f = h3.shape[-1]
    per_channel = ad.transpose(ad.reshape(h3, (n, h * w, f)), (0, 2, 1))
    z = ad.matmul(per_channel, model.carriers.reshape(h * w, -1) / (h * w))
    return ad.reshape(z, (n, f * model.msg_len))


def vib_heads(model: WatermarkModel, z: Tensor):
    mu = ad.add_bias(ad.matmul(z, model["mu.w"]), model["mu.b"])
    lo, hi = model.vib.logvar_clip
    logvar = ad.clip(ad.add_bias(ad.matmul(z, model["logvar.w"]), model["logvar.b"]), lo, hi)
    return mu, logvar


def vib_sample(model: WatermarkModel, z: Tensor, rng: np.random.Generator | None = None,
               mode: str = "train", alpha: float | None = None):
    """Stochastic latent U with the reparameterisation trick.

    Train mode: U = mu + alpha * eps * exp(logvar / 2), eps ~ N(0, I) from
    ``rng``. Infer mode: U = mu. Returns ``(U, mu, logvar)``.
    """
    mu, logvar = vib_heads(model, z)
    a = model.vib.alpha if alpha is None else alpha
    if mode == "infer" or a == 0.0:
        return mu, mu, logvar
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode sampling needs a generator")
    eps = rng.standard_normal(mu.shape)
    sigma = ad.exp(ad.mul(logvar, 0.5))
    return ad.add(mu, ad.mul(sigma, a * eps)), mu, logvar


def readout(model: WatermarkModel, u: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(u, model["dec.w"]), model["dec.b"])


def logits_of(model: WatermarkModel, image, mode: str = "infer", rng=None) -> Tensor:
    u, _, _ = vib_sample(model, extract(model, image), rng, mode)
    return readout(model, u)


def decode(model: WatermarkModel, image):
    """Deterministic decode: raw logits and hard bits (logit >= 0 -> 1)."""
    logits = logits_of(model, image, "infer")
    return logits.data, (logits.data >= 0).astype(float)


@dataclass
class LossParts:
    total: Tensor
    l_img: float
    l_rec: float
    l_kl: float
    logits: np.ndarray
    x_wm: np.ndarray


def total_loss(model: WatermarkModel, cover, msg, distortion, rng: np.random.Generator,
               lambda_img: float = 1.0, lambda_rec: float = 1.0, vib_enabled: bool = True) -> LossParts:
    """lambda_img * MSE(x, x_wm) + lambda_rec * BCE(m, logits) + beta * KL on the attacked path.

    With ``vib_enabled=False`` the latent is U = mu and the KL weight is zero
    (the KL value is still reported).
    """
    x = _images(cover)
    msg = np.asarray(msg, dtype=float).reshape(x.shape[0], -1)
    x_wm = embed(model, x, msg)
    spec = distortion if isinstance(distortion, noise.DistortionSpec) else noise.parse_spec(distortion)
    attacked = noise.apply(spec, x_wm, x.data, rng).image
    z = extract(model, attacked)
    if vib_enabled:
        u, mu, logvar = vib_sample(model, z, rng, "train")
        beta = model.vib.beta
    else:
        u, mu, logvar = vib_sample(model, z, mode="infer")
        beta = 0.0
    logits = readout(model, u)
    l_img = ad.mse_loss(x_wm, x)
    l_rec = ad.bce_loss(logits, msg)
    l_kl = ad.gaussian_kl(mu, logvar)
    total = ad.add(ad.mul(l_img, lambda_img), ad.mul(l_rec, lambda_rec))
    if beta:
        total = ad.add(total, ad.mul(l_kl, beta))
    return LossParts(total, l_img.item(), l_rec.item(), l_kl.item(), logits.data, x_wm.data)


def bit_error_rate(logits: np.ndarray, msg: np.ndarray) -> float:
    return float(np.mean((np.asarray(logits) >= 0).astype(float) != np.asarray(msg)))


def evaluate_ber(model: WatermarkModel, covers: np.ndarray, msgs: np.ndarray, spec, rng,
                 batch_size: int = 100) -> dict:
    """BER and PSNR of (embed -> distortion -> infer decode) over a cover set."""
    errs, psnrs = [], []
    spec = spec if isinstance(spec, noise.DistortionSpec) else noise.parse_spec(spec)
    for s in range(0, len(covers), batch_size):
        x = covers[s:s + batch_size]
        m = msgs[s:s + batch_size]
        x_wm = embed(model, ad.Tensor(x), m).data
        attacked = noise.apply(spec, x_wm, x, rng).image.data
        logits, _ = decode(model, attacked)
        errs.append(np.mean((logits >= 0) != m, axis=1))
        mse = np.mean((x_wm - x) ** 2, axis=(1, 2))
        psnrs.append(10 * np.log10(1.0 / np.maximum(mse, 1e-20)))
    errs = np.concatenate(errs)
    psnrs = np.concatenate(psnrs)
    return {"ber": float(errs.mean()), "psnr": float(np.mean(psnrs))}


class TrainingDiverged(FloatingPointError):
    pass


def train(model: WatermarkModel, cfg: TrainConfig, covers: np.ndarray, log=None):
    """Training loop: embed -> attack -> extract -> sample -> decode -> loss -> Adam step.

    The cover set is split into train/validation by ``cfg.seed``; messages,
    attacks, bottleneck noise and shuffling use separate seeded streams.
    Returns ``(model, history)`` with one dict per epoch.
    """
    train_idx, val_idx = split_indices(len(covers), cfg)
    params = model.params
    opt = ad.Adam(params, lr=cfg.learning_rate)
    rng_msg = stream(cfg.seed, "messages")
    rng_atk = stream(cfg.seed, "attacks")
    rng_noise = stream(cfg.seed, "noise")
    rng_shuffle = stream(cfg.seed, "shuffle")
    val_covers = covers[val_idx]
    val_msgs = random_messages(stream(cfg.seed, "val-messages"), len(val_idx), model.msg_len)
    val_pool = cfg.val_pool or cfg.pool
    history = []
    last = None
    for epoch in range(cfg.epochs):
        lam_img = image_weight(epoch, cfg)
        order = train_idx[rng_shuffle.permutation(len(train_idx))]
        sums = np.zeros(3)
        errs = []
        n_batches = 0
        for s in range(0, len(order), cfg.batch_size):
            x = covers[order[s:s + cfg.batch_size]]
            m = random_messages(rng_msg, len(x), model.msg_len)
            spec = cfg.pool[int(rng_atk.integers(len(cfg.pool)))]
            opt.zero_grad()
            parts = total_loss(model, x, m, spec, rng_noise, lam_img, cfg.lambda_rec, cfg.vib_enabled)
            vals = np.array([parts.l_img, parts.l_rec, parts.l_kl])
            if not np.all(np.isfinite(vals)) or not np.isfinite(parts.total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; last finite components {last}")
            last = dict(zip(("L_img", "L_rec", "L_KL"), vals.tolist()))
            parts.total.backward()
            opt.step()
            sums += vals
            errs.append(bit_error_rate(parts.logits, m))
            n_batches += 1
        val_rng = stream(cfg.seed, f"val-attacks-{epoch}")
        val_ber = float(np.mean([evaluate_ber(model, val_covers, val_msgs, sp, val_rng)["ber"] for sp in val_pool]))
        row = {"epoch": epoch + 1, "L_img": sums[0] / n_batches, "L_rec": sums[1] / n_batches,
               "L_KL": sums[2] / n_batches, "train_BER": float(np.mean(errs)), "val_BER": val_ber}
        history.append(row)
        if log is not None:
            log(row)
    return model, history


def image_weight(epoch: int, cfg: TrainConfig) -> float:
    """Image-loss weight for an epoch: linear from ``lambda_img_start`` to
    ``lambda_img`` over the first ``img_warmup`` epochs, constant after.

    A strong image penalty from the first step keeps the residual at zero
    before the decoder has learned to read anything.
    """
    start = cfg.lambda_img if cfg.lambda_img_start is None else cfg.lambda_img_start
    if cfg.img_warmup <= 0 or epoch >= cfg.img_warmup:
        return cfg.lambda_img
    return start + (cfg.lambda_img - start) * epoch / cfg.img_warmup


def split_indices(n: int, cfg: TrainConfig):
    from .data import split

    return split(n, cfg.val_fraction, cfg.seed)
