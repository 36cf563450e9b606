"""Synthetic covers, seeded RNG streams and PGM image files."""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose derived from a root seed.

    The purpose name is hashed with CRC-32 and appended to the seed entropy,
    so adding a new purpose never perturbs the existing streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode())]))


def power_law_covers(n: int, size: int = 32, seed: int = 0, exponent: float = 2.0,
                     purpose: str = "covers") -> np.ndarray:
    """Isotropic Gaussian random fields in [0, 1] with a power-law spectrum.

    ``exponent`` is the slope of the radially integrated spectrum: the energy
    in a thin annulus at radial frequency f falls as 1 / f^exponent, so each
    2-D frequency bin carries power proportional to 1 / f^(exponent + 1).
    Each field is standardised and mapped through 0.5 + 0.18 z, then clipped,
    which keeps most pixels away from the clip boundaries.
    """
    rng = stream(seed, purpose)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    amp = f ** (-(exponent + 1.0) / 2.0)
    amp[0, 0] = 0.0
    white = rng.standard_normal((n, size, size))
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * amp))
    field -= field.mean(axis=(1, 2), keepdims=True)
    field /= field.std(axis=(1, 2), keepdims=True)
    return np.clip(0.5 + 0.18 * field, 0.0, 1.0)


def split(n: int, val_fraction: float, seed: int):
    """Seeded permutation split into (train_idx, val_idx)."""
    perm = stream(seed, "split").permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def random_messages(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, length)).astype(float)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), maxval 65535, big-endian samples, row-major."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(float) / maxval


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 / mse)
