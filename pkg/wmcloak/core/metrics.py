# wmcloak/core/metrics.py
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from scipy.signal import convolve2d
from scipy.spatial.distance import cdist

from wmcloak.core.errors import ShapeError
from wmcloak.core.imagedata import IMAGE_EXTENSIONS, Image, Watermark, image_to_tensor, read_image
from wmcloak.utils.seeding import torch_generator

logger = logging.getLogger(__name__)

PSNR_IDENTICAL = math.inf
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0
FID_JITTER = 1e-6

ArrayLike = Union[Image, np.ndarray]


def _pixels(img: ArrayLike) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, Image) else img, dtype=np.float64)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: ArrayLike, b: ArrayLike) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: ArrayLike, b: ArrayLike) -> float:
    """PSNR in dB with peak 1.0; identical inputs give PSNR_IDENTICAL (+inf)"""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_IDENTICAL
    return float(10.0 * math.log10(1.0 / err))


def mean_psnr(values: Sequence[float]) -> float:
    """
    Mean of per-image PSNRs (not PSNR of the mean MSE).

    Identical pairs (+inf) are left out of the mean and counted by
    identical_count; the result is +inf only when every pair is identical.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("mean_psnr needs at least one value")
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else PSNR_IDENTICAL


def identical_count(values: Sequence[float]) -> int:
    return int(np.isinf(np.asarray(values, dtype=np.float64)).sum())


def psnr_to_json(value: Optional[float]):
    if value is None:
        return None
    return "identical" if math.isinf(value) else value


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> np.ndarray:
    c1, c2 = (SSIM_K1 * SSIM_L) ** 2, (SSIM_K2 * SSIM_L) ** 2
    filt = lambda z: convolve2d(z, window, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a: ArrayLike, b: ArrayLike) -> float:
    """Mean local SSIM, Gaussian window 11 / σ 1.5, averaged over channels"""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {a.shape[:2]}")
    window = gaussian_window()
    maps = [_ssim_channel(a[..., c], b[..., c], window) for c in range(a.shape[2])]
    return float(np.mean(maps))


def difference_image(gen_orig: ArrayLike, gen_adv: ArrayLike) -> np.ndarray:
    """Grayscale (unweighted channel mean) of |gen_adv − gen_orig|"""
    a, b = _pair(gen_orig, gen_adv)
    diff = np.abs(b - a)
    return diff.mean(axis=2) if diff.ndim == 3 else diff


def zncc(d: np.ndarray, m: np.ndarray) -> float:
    """Zero-normalised cross-correlation; 0 when d is constant"""
    d = np.asarray(d, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if d.shape != m.shape:
        raise ShapeError(f"Shape mismatch: {d.shape} vs {m.shape}")
    m0 = m - m.mean()
    m_norm = np.sqrt(np.sum(m0 ** 2))
    if m_norm == 0.0:
        raise ValueError("Watermark is constant (zero variance)")
    d0 = d - d.mean()
    d_norm = np.sqrt(np.sum(d0 ** 2))
    if d_norm == 0.0:
        return 0.0
    return float(np.sum(d0 * m0) / (d_norm * m_norm))


def ncc_watermark(gen_orig: ArrayLike, gen_adv: ArrayLike, m: Union[Watermark, np.ndarray]) -> float:
    """NCC between the watermark and the difference of the two generated images"""
    mask = m.mask if isinstance(m, Watermark) else np.asarray(m)
    return zncc(difference_image(gen_orig, gen_adv), mask)


class ToyFeatureExtractor(nn.Module):
    """Fixed-seed convolutional embedder for desk-scale FID/precision"""

    extractor_id = "toy-conv-v1"

    def __init__(self, seed: int = 0, dim: int = 64):
        super().__init__()
        self.model = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, dim, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten())
        gen = torch_generator(seed)
        with torch.no_grad():
            for layer in self.model:
                if isinstance(layer, nn.Conv2d):
                    fan_in = layer.weight[0].numel()
                    layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    layer.bias.zero_()
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x * 2 - 1)


def embed_images(images: Sequence[Image], extractor: nn.Module) -> np.ndarray:
    with torch.no_grad():
        feats = [extractor(image_to_tensor(img)).double().numpy()[0] for img in images]
    return np.stack(feats)


def embed_set(images: Sequence[Image], extractor: nn.Module) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the extractor features"""
    return gaussian_stats(embed_images(images, extractor))


def gaussian_stats(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False) if len(features) > 1 else np.zeros((features.shape[1],) * 2)
    return mu, np.atleast_2d(sigma)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(stats_a: Tuple[np.ndarray, np.ndarray], stats_b: Tuple[np.ndarray, np.ndarray],
                     jitter: float = FID_JITTER) -> float:
    """‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½) via the symmetric form Σa^½ Σb Σa^½"""
    mu_a, sigma_a = np.asarray(stats_a[0], np.float64), np.atleast_2d(np.asarray(stats_a[1], np.float64))
    mu_b, sigma_b = np.asarray(stats_b[0], np.float64), np.atleast_2d(np.asarray(stats_b[1], np.float64))
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape or sigma_a.shape != (mu_a.size, mu_a.size):
        raise ShapeError(f"Embedding dimension mismatch: {mu_a.shape}/{sigma_a.shape} vs {mu_b.shape}/{sigma_b.shape}")
    eye = np.eye(mu_a.size) * jitter
    sigma_a, sigma_b = sigma_a + eye, sigma_b + eye
    root_a = _sqrt_psd(sigma_a)
    cross = root_a @ sigma_b @ root_a
    tr_cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh((cross + cross.T) / 2), 0.0, None)))
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(sigma_a) + np.trace(sigma_b) - 2 * tr_cross
    return float(max(value, 0.0))


def _kth_radii(feats: np.ndarray, k: int) -> np.ndarray:
    dists = cdist(feats, feats)
    return np.sort(dists, axis=1)[:, k]  # column 0 is the point itself


def _coverage(points: np.ndarray, manifold: np.ndarray, radii: np.ndarray) -> float:
    dists = cdist(points, manifold)
    return float(np.mean(np.any(dists <= radii[None, :], axis=1)))


def precision_recall_knn(real_feats: np.ndarray, gen_feats: np.ndarray, k: int = 3) -> Tuple[float, float]:
    """k-NN manifold precision and recall"""
    real_feats = np.asarray(real_feats, dtype=np.float64)
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    if k < 1 or len(real_feats) < k + 1 or len(gen_feats) < k + 1:
        raise ValueError(f"precision/recall with k={k} needs at least {k + 1} points per set")
    precision = _coverage(gen_feats, real_feats, _kth_radii(real_feats, k))
    recall = _coverage(real_feats, gen_feats, _kth_radii(gen_feats, k))
    return precision, recall


@dataclass
class PairMetrics:
    name: str
    mse: float
    psnr: float
    ssim: float
    ncc: Optional[float] = None


@dataclass
class MetricReport:
    pairs: List[PairMetrics] = field(default_factory=list)
    aggregates: Dict[str, Optional[float]] = field(default_factory=dict)
    params: Dict[str, Any] = field(default_factory=dict)

    def recompute_aggregates(self):
        """Per-pair means (PSNR as mean of per-image values); set metrics are kept"""
        for key in ("mse", "ssim", "ncc"):
            values = [getattr(p, key) for p in self.pairs if getattr(p, key) is not None]
            self.aggregates[key] = float(np.mean(values)) if values else None
        psnrs = [p.psnr for p in self.pairs]
        self.aggregates["psnr"] = mean_psnr(psnrs) if psnrs else None
        self.aggregates["identical_pairs"] = identical_count(psnrs)
        return self

    def to_dict(self) -> Dict[str, Any]:
        pairs = []
        for p in self.pairs:
            row = asdict(p)
            row["psnr"] = psnr_to_json(row["psnr"])
            pairs.append(row)
        aggregates = dict(self.aggregates)
        aggregates["psnr"] = psnr_to_json(aggregates.get("psnr"))
        return {"pairs": pairs, "aggregates": aggregates, "params": self.params}

    def to_json(self, path: Optional[Union[str, Path]] = None) -> str:
        text = json.dumps(self.to_dict(), indent=4, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_table(self, label: str = "ours") -> str:
        """Adversarial-example quality row and generated-image row"""
        agg = self.aggregates
        fmt = lambda v, spec: "-" if v is None else ("identical" if isinstance(v, float) and math.isinf(v)
                                                     else format(v, spec))
        quality = pd.DataFrame([{"Method": label, "MSE": fmt(agg.get("mse"), ".4f"),
                                 "PSNR": fmt(agg.get("psnr"), ".1f"), "SSIM": fmt(agg.get("ssim"), ".2f")}])
        generation = pd.DataFrame([{"Method": label, "NCC": fmt(agg.get("ncc"), ".2f"),
                                    "FID": fmt(agg.get("fid"), ".1f"), "prec.": fmt(agg.get("precision"), ".2f"),
                                    "recall": fmt(agg.get("recall"), ".2f")}])
        return quality.to_string(index=False) + "\n\n" + generation.to_string(index=False)


def _list_images(directory: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS}


def evaluate_images(reference: Sequence[Image], candidate: Sequence[Image], names: Sequence[str],
                    watermark: Optional[Union[Watermark, np.ndarray]] = None,
                    extractor: Optional[nn.Module] = None, k: int = 3) -> MetricReport:
    """Pairwise quality/NCC plus set-level FID and precision/recall"""
    extractor = extractor if extractor is not None else ToyFeatureExtractor()
    report = MetricReport(params={"ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA, "k": k,
                                  "feature_extractor": getattr(extractor, "extractor_id", type(extractor).__name__)})
    for name, ref, cand in zip(names, reference, candidate):
        report.pairs.append(PairMetrics(
            name=name, mse=mse(ref, cand), psnr=psnr(ref, cand), ssim=ssim(ref, cand),
            ncc=ncc_watermark(ref, cand, watermark) if watermark is not None else None))
    report.recompute_aggregates()

    if reference:
        feats_ref = embed_images(reference, extractor)
        feats_cand = embed_images(candidate, extractor)
        report.aggregates["fid"] = frechet_distance(gaussian_stats(feats_ref), gaussian_stats(feats_cand))
        if len(reference) >= k + 1:
            report.aggregates["precision"], report.aggregates["recall"] = precision_recall_knn(feats_ref, feats_cand, k)
        else:
            logger.warning(f"Skipping precision/recall: {len(reference)} images < k+1={k + 1}")
            report.aggregates["precision"] = report.aggregates["recall"] = None
    return report


def evaluate_directories(reference_dir: Union[str, Path], candidate_dir: Union[str, Path],
                         watermark: Optional[Union[Watermark, np.ndarray]] = None,
                         extractor: Optional[nn.Module] = None, k: int = 3,
                         image_size: Optional[Tuple[int, int]] = None) -> MetricReport:
    """Pair files by stem across two directories and evaluate them"""
    refs, cands = _list_images(Path(reference_dir)), _list_images(Path(candidate_dir))
    names = sorted(set(refs) & set(cands))
    missing = sorted(set(refs) ^ set(cands))
    if missing:
        logger.warning(f"Unpaired images ignored: {missing}")
    reference = [read_image(refs[n], image_size) for n in names]
    candidate = [read_image(cands[n], reference[i].size) for i, n in enumerate(names)]
    report = evaluate_images(reference, candidate, names, watermark, extractor, k)
    report.params["unpaired"] = missing
    return report
