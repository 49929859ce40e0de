"""Full-reference image quality (SSIM, FSIM, VIF) and rank-1 identification.

All IQA functions take HxW or HxWx3 arrays in [0, 1]; colour inputs are reduced
to BT.601 luminance first. Parameters follow the metrics' original releases.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.signal import convolve2d, fftconvolve

from .errors import DatasetError, ShapeError
from .imaging import to_gray

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
FSIM_T1, FSIM_T2 = 0.85, 160.0
VIF_SIGMA_NSQ = 2.0

log = logging.getLogger(__name__)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # windows here are symmetric, so convolution equals correlation
    return fftconvolve(img, win, mode="valid")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian (sigma 1.5) windows."""
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    # per-window values are bounded by Cauchy-Schwarz; E[x^2]-mu^2 rounding can overshoot
    return float(np.mean(np.clip(num / den, -1.0, 1.0)))


# -- FSIM -------------------------------------------------------------------

def _freq_grid(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n

    return np.meshgrid(axis(cols), axis(rows))


def phase_congruency(im: np.ndarray, nscale: int = 4, norient: int = 4, min_wavelength: float = 6,
                     mult: float = 2, sigma_onf: float = 0.55, d_theta_on_sigma: float = 1.2,
                     k: float = 2.0, epsilon: float = 1e-4) -> np.ndarray:
    """Kovesi phase congruency with log-Gabor filters, noise-compensated, as used by FSIM."""
    rows, cols = im.shape
    imagefft = np.fft.fft2(im)
    x, y = _freq_grid(rows, cols)
    radius = np.sqrt(x**2 + y**2)
    theta = np.arctan2(-y, x)
    lowpass = np.fft.ifftshift(1.0 / (1.0 + (radius / 0.45) ** (2 * 15)))
    radius = np.fft.ifftshift(radius)
    theta = np.fft.ifftshift(theta)
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    theta_sigma = math.pi / norient / d_theta_on_sigma

    log_gabor = []
    for s in range(nscale):
        fo = 1.0 / (min_wavelength * mult**s)
        lg = np.exp(-(np.log(radius / fo) ** 2) / (2 * math.log(sigma_onf) ** 2)) * lowpass
        lg[0, 0] = 0.0
        log_gabor.append(lg)

    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(norient):
        angl = o * math.pi / norient
        ds = sin_t * math.cos(angl) - cos_t * math.sin(angl)
        dc = cos_t * math.cos(angl) + sin_t * math.sin(angl)
        spread = np.exp(-(np.abs(np.arctan2(ds, dc)) ** 2) / (2 * theta_sigma**2))
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo, ifft_filters = [], []
        for s in range(nscale):
            filt = log_gabor[s] * spread
            ifft_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            resp = np.fft.ifft2(imagefft * filt)
            eo.append(resp)
            sum_an += np.abs(resp)
            sum_e += resp.real
            sum_o += resp.imag
            if s == 0:
                em_n = np.sum(filt**2)
        x_energy = np.sqrt(sum_e**2 + sum_o**2) + epsilon
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for resp in eo:
            e, od = resp.real, resp.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        mean_e2n = -np.median(np.abs(eo[0]) ** 2) / math.log(0.5)
        noise_power = mean_e2n / em_n
        est_sum_an2 = sum(f**2 for f in ifft_filters).sum()
        est_sum_aiaj = sum(
            (ifft_filters[i] * ifft_filters[j]).sum()
            for i in range(nscale - 1) for j in range(i + 1, nscale)
        )
        noise_energy2 = 2 * noise_power * est_sum_an2 + 4 * noise_power * est_sum_aiaj
        tau = math.sqrt(noise_energy2 / 2)
        threshold = (tau * math.sqrt(math.pi / 2) + k * math.sqrt((2 - math.pi / 2) * tau**2)) / 1.7
        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += sum_an
    return energy_all / an_all


_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
_SCHARR_Y = np.array([[3, 10, 3], [0, 0, 0], [-3, -10, -3]]) / 16.0


def _fsim_prepare(img: np.ndarray) -> np.ndarray:
    y = img * 255.0
    f = max(1, round(min(y.shape) / 256))
    if f > 1:
        y = convolve2d(y, np.full((f, f), 1.0 / f**2), mode="same")[::f, ::f]
    return y


def fsim(a, b) -> float:
    """Feature similarity (luminance FSIM): phase congruency x gradient-magnitude similarity."""
    a, b = _pair(a, b)
    y1, y2 = _fsim_prepare(a), _fsim_prepare(b)
    pc1, pc2 = phase_congruency(y1), phase_congruency(y2)
    g1 = np.hypot(convolve2d(y1, _SCHARR_X, mode="same"), convolve2d(y1, _SCHARR_Y, mode="same"))
    g2 = np.hypot(convolve2d(y2, _SCHARR_X, mode="same"), convolve2d(y2, _SCHARR_Y, mode="same"))
    s_pc = (2 * pc1 * pc2 + FSIM_T1) / (pc1**2 + pc2**2 + FSIM_T1)
    s_g = (2 * g1 * g2 + FSIM_T2) / (g1**2 + g2**2 + FSIM_T2)
    pcm = np.maximum(pc1, pc2)
    denom = pcm.sum()
    # a weighted mean of values in [0, 1]; cap the rounding overshoot
    if denom == 0:
        return min(float(np.mean(s_pc * s_g)), 1.0)
    return min(float((s_g * s_pc * pcm).sum() / denom), 1.0)


def vif(reference, distorted, sigma_nsq: float = VIF_SIGMA_NSQ) -> float:
    """Pixel-domain VIF over 4 scales. Directional: ``reference`` comes first."""
    ref, dist = _pair(reference, distorted)
    ref, dist = ref * 255.0, dist * 255.0
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
        if min(ref.shape) < n:
            raise ShapeError("image too small for 4-scale VIF (needs at least 41x41)")
        mu1, mu2 = _filter_valid(ref, win), _filter_valid(dist, win)
        s1 = np.maximum(_filter_valid(ref * ref, win) - mu1**2, 0.0)
        s2 = np.maximum(_filter_valid(dist * dist, win) - mu2**2, 0.0)
        s12 = _filter_valid(ref * dist, win) - mu1 * mu2
        g = s12 / (s1 + 1e-10)
        sv = s2 - g * s12
        low1 = s1 < 1e-10
        g[low1] = 0.0
        sv[low1] = s2[low1]
        s1[low1] = 0.0
        low2 = s2 < 1e-10
        g[low2] = 0.0
        sv[low2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv[sv <= 1e-10] = 1e-10
        num += np.sum(np.log10(1 + g**2 * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1 + s1 / sigma_nsq))
    if den == 0:
        return 1.0 if num == 0 else float("inf")
    return float(num / den)


@dataclass
class IQAReport:
    names: list[str] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    fsim: list[float] = field(default_factory=list)
    vif: list[float] = field(default_factory=list)

    def add(self, name: str, reference, synthesized) -> None:
        """Score one pair. A metric undefined at this image size is recorded as NaN."""
        _pair(reference, synthesized)
        values = {}
        for key, fn in (("ssim", ssim), ("fsim", fsim), ("vif", vif)):
            try:
                values[key] = fn(reference, synthesized)
            except ShapeError as exc:
                log.warning("%s: %s undefined (%s)", name, key, exc)
                values[key] = float("nan")
        self.names.append(name)
        for key, v in values.items():
            getattr(self, key).append(v)

    @property
    def means(self) -> dict[str, float]:
        """Per-metric mean over pairs where the metric is defined."""
        out = {}
        for k in ("ssim", "fsim", "vif"):
            vals = np.asarray(getattr(self, k), dtype=float)
            vals = vals[np.isfinite(vals)]
            out[k] = float(vals.mean()) if vals.size else float("nan")
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["name", "ssim", "fsim", "vif"])
            for row in zip(self.names, self.ssim, self.fsim, self.vif):
                out.writerow([row[0], *(f"{v:.6f}" for v in row[1:])])


# -- rank-1 identification ----------------------------------------------------

@dataclass
class RecognitionReport:
    recognizer_id: str
    accuracy: float
    probe_identities: list
    predicted: list
    distances: list[float]

    @property
    def probes(self) -> int:
        return len(self.probe_identities)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["probe", "nearest_gallery", "distance", "correct"])
            for p, g, d in zip(self.probe_identities, self.predicted, self.distances):
                out.writerow([p, g, f"{d:.6f}", int(p == g)])


def pairwise_distance(probes: torch.Tensor, gallery: torch.Tensor, distance: str) -> torch.Tensor:
    probes, gallery = probes.to(torch.float64), gallery.to(torch.float64)
    if distance == "euclidean":
        return torch.cdist(probes, gallery)
    if distance == "cosine":
        p = torch.nn.functional.normalize(probes, dim=-1)
        g = torch.nn.functional.normalize(gallery, dim=-1)
        return 1.0 - p @ g.T
    raise ValueError(f"unknown distance {distance!r}")


def rank1_from_features(gallery_ids: Sequence, gallery: torch.Tensor, probe_ids: Sequence,
                        probes: torch.Tensor, distance: str = "euclidean",
                        recognizer_id: str = "features") -> RecognitionReport:
    if len(set(gallery_ids)) != len(gallery_ids):
        raise DatasetError("gallery identities must be unique")
    missing = set(probe_ids) - set(gallery_ids)
    if missing:
        raise DatasetError(f"probe identities absent from gallery: {sorted(map(str, missing))}")
    if len(probe_ids) == 0:
        raise DatasetError("no probes")
    d = pairwise_distance(probes, gallery, distance)
    best = torch.argmin(d, dim=1)
    predicted = [gallery_ids[i] for i in best.tolist()]
    correct = sum(p == q for p, q in zip(probe_ids, predicted))
    return RecognitionReport(recognizer_id, correct / len(probe_ids), list(probe_ids), predicted,
                             d[torch.arange(len(best)), best].tolist())


def rank1_accuracy(gallery: Sequence[tuple], probes: Sequence[tuple], extractor,
                   distance: str = "euclidean", value_range: str = "unit") -> RecognitionReport:
    """Nearest-gallery identification of each probe using ``extractor`` features.

    ``gallery`` and ``probes`` are sequences of (identity, image tensor).
    """
    g_ids = [i for i, _ in gallery]
    p_ids = [i for i, _ in probes]
    if not gallery or not probes:
        raise DatasetError("gallery and probe sets must be non-empty")
    with torch.no_grad():
        g = torch.stack([extractor.extract(img, value_range).values for _, img in gallery])
        p = torch.stack([extractor.extract(img, value_range).values for _, img in probes])
    return rank1_from_features(g_ids, g, p_ids, p, distance, extractor.extractor_id)
