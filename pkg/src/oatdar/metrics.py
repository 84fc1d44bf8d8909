"""Image-quality metrics and multi-method comparison reports.

PSNR uses a declared cap of 99 dB (identical images would otherwise be
infinite and poison aggregates). SSIM follows the standard windowed
formulation: 11x11 Gaussian weights with sigma 1.5, K1 = 0.01, K2 = 0.03,
averaged over windows fully inside the image.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"psnr shapes differ: {x.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP)


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _windowed(img: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local means over all fully interior windows."""
    win = np.lib.stride_tricks.sliding_window_view(
        img, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(win, _KERNEL, axes=([2, 3], [0, 1]))


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"ssim shapes differ: {x.shape} vs {ref.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {x.shape} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _windowed(x)
    mu_y = _windowed(ref)
    exx = _windowed(x * x)
    eyy = _windowed(ref * ref)
    exy = _windowed(x * ref)
    var_x = exx - mu_x * mu_x
    var_y = eyy - mu_y * mu_y
    cov = exy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    entry_index: int
    method: str          # e.g. lbp / tikhonov / fdunet / dar / dar_lbp
    nis: int             # 0 for non-diffusion methods
    snr_db: float
    psnr: float
    ssim: float
    wall_time: float


@dataclass
class MetricReport:
    records: list
    config_hash: str = ""
    aggregates: dict = field(default_factory=dict)

    def variant_names(self):
        seen = []
        for r in self.records:
            name = f"{r.method}-{r.nis}" if r.nis else r.method
            if name not in seen:
                seen.append(name)
        return seen

    def variant_records(self, name: str):
        return [r for r in self.records
                if (f"{r.method}-{r.nis}" if r.nis else r.method) == name]

    def compute_aggregates(self) -> dict:
        out = {}
        for name in self.variant_names():
            rs = self.variant_records(name)
            ps = np.array([r.psnr for r in rs])
            ss = np.array([r.ssim for r in rs])
            ts = np.array([r.wall_time for r in rs])
            out[name] = {
                "count": len(rs),
                "psnr_mean": float(ps.mean()),
                "psnr_std": float(ps.std(ddof=1)) if len(rs) > 1 else 0.0,
                "psnr_median": float(np.median(ps)),
                "ssim_mean": float(ss.mean()),
                "ssim_std": float(ss.std(ddof=1)) if len(rs) > 1 else 0.0,
                "ssim_median": float(np.median(ss)),
                "wall_time_mean": float(ts.mean()),
            }
        self.aggregates = out
        return out

    def median_psnr(self, name: str) -> float:
        return float(np.median([r.psnr for r in self.variant_records(name)]))

    def write(self, directory) -> Path:
        """records.tsv carries only deterministic columns (it is the
        artifact reproducibility is checked against); wall-clock times go
        to timings.tsv alongside."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = ["#oatdar-report v1", f"#config_hash={self.config_hash}",
                 "index\tmethod\tnis\tsnr_db\tpsnr\tssim"]
        times = ["index\tmethod\tnis\twall_time"]
        for r in self.records:
            lines.append(f"{r.entry_index}\t{r.method}\t{r.nis}\t"
                         f"{r.snr_db!r}\t{r.psnr!r}\t{r.ssim!r}")
            times.append(f"{r.entry_index}\t{r.method}\t{r.nis}\t"
                         f"{r.wall_time!r}")
        (directory / "records.tsv").write_text("\n".join(lines) + "\n")
        (directory / "timings.tsv").write_text("\n".join(times) + "\n")
        self.compute_aggregates()
        rows = [f"{'variant':<14}{'n':>5}{'PSNR mean':>12}{'+-':>8}"
                f"{'median':>10}{'SSIM mean':>12}{'+-':>8}{'median':>10}"
                f"{'sec/img':>10}"]
        for name, a in self.aggregates.items():
            rows.append(f"{name:<14}{a['count']:>5}{a['psnr_mean']:>12.3f}"
                        f"{a['psnr_std']:>8.3f}{a['psnr_median']:>10.3f}"
                        f"{a['ssim_mean']:>12.4f}{a['ssim_std']:>8.4f}"
                        f"{a['ssim_median']:>10.4f}"
                        f"{a['wall_time_mean']:>10.3f}")
        (directory / "summary.txt").write_text("\n".join(rows) + "\n")
        return directory / "records.tsv"

    @classmethod
    def read(cls, directory) -> "MetricReport":
        directory = Path(directory)
        times = []
        tpath = directory / "timings.tsv"
        if tpath.is_file():
            times = [float(line.split("\t")[3])
                     for line in tpath.read_text().splitlines()[1:]]
        records = []
        chash = ""
        for line in (directory / "records.tsv").read_text().splitlines():
            if line.startswith("#config_hash="):
                chash = line.split("=", 1)[1]
                continue
            if line.startswith("#") or line.startswith("index\t") \
                    or not line.strip():
                continue
            f = line.split("\t")
            wall = times[len(records)] if len(records) < len(times) else 0.0
            records.append(MetricRecord(int(f[0]), f[1], int(f[2]),
                                        float(f[3]), float(f[4]),
                                        float(f[5]), wall))
        rep = cls(records=records, config_hash=chash)
        rep.compute_aggregates()
        return rep

    def content_hash(self, directory) -> str:
        path = Path(directory) / "records.tsv"
        return hashlib.sha256(path.read_bytes()).hexdigest()


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False
