"""Error metrics between an estimate and ground truth, CSV reports and plots.

All metrics use only pixels inside the ground-truth evaluation mask (surface
points seen unoccluded by every camera) that the estimate also covers.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .consistency import DIFFUSE, SPECULAR
from .spectral import SpectralModel, dense_reflectance, spectra_to_rgb


def angular_error(n_est: np.ndarray, n_gt: np.ndarray) -> np.ndarray:
    """Degrees between unit normals, ``arccos`` of the clamped dot product."""
    dot = np.sum(np.asarray(n_est, float) * np.asarray(n_gt, float), axis=-1)
    return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))


def relative_rmse(est: np.ndarray, ref: np.ndarray, axis=-1) -> np.ndarray:
    est, ref = np.asarray(est, float), np.asarray(ref, float)
    num = np.sqrt(np.mean((est - ref) ** 2, axis=axis))
    den = np.sqrt(np.mean(ref ** 2, axis=axis))
    return num / np.where(den > 0, den, np.nan)


@dataclass
class EvalReport:
    pixels_evaluated: int
    pixels_missing: int          # in the evaluation mask but not reconstructed
    pixels_diffuse: int
    pixels_specular: int
    angular_mean: float
    angular_median: float
    angular_max: float
    depth_rmse: float
    reflectance_mean: float      # per-pixel relative RMSE of dense curves
    reflectance_median: float
    reflectance_max: float
    band_reflectance: list       # relative RMSE per band, pooled over pixels
    specular_pixels: int         # ground-truth specular pixels with a fitted lobe
    specular_beta_error: float   # median relative error
    specular_shininess_error: float

    def rows(self) -> list[tuple[str, str]]:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, list):
                out += [(f"{k}_{j}", repr(float(x))) for j, x in enumerate(v)]
            else:
                out.append((k, repr(float(v)) if isinstance(v, float) else str(v)))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerows(self.rows())


def _stat(fn, a):
    return float(fn(a)) if a.size else float("nan")


def evaluate_maps(est: dict, gt: dict, spectral: SpectralModel):
    """Compare estimate maps with ground truth; returns (EvalReport, per-pixel maps)."""
    if est["normal"].shape != gt["normal"].shape:
        raise ValueError(f"estimate is {est['normal'].shape[:2]}, ground truth is "
                         f"{gt['normal'].shape[:2]}")
    valid = gt.get("eval_mask", gt["mask"]).astype(bool)
    have = est["mask"].astype(bool)
    sel = valid & have
    ang = angular_error(est["normal"][sel], gt["normal"][sel])
    dz = est["depth"][sel].astype(float) - gt["depth"][sel].astype(float)
    r_gt = dense_reflectance(spectral, gt["coefficients"][sel].astype(float))
    r_est = dense_reflectance(spectral, est["coefficients"][sel].astype(float))
    rel = relative_rmse(r_est, r_gt)
    bands = []
    for j in range(spectral.num_bands):
        idx = spectral.band_index[j]
        bands.append(float(np.sqrt(np.sum((r_est[:, idx] - r_gt[:, idx]) ** 2)
                                   / max(np.sum(r_gt[:, idx] ** 2), 1e-300))) if sel.any()
                     else float("nan"))
    label = est["label"][sel]
    fit = (gt["specular"][sel] > 0) & (est["specular"][sel] > 0)
    b_err = np.abs(est["specular"][sel][fit] / gt["specular"][sel][fit] - 1)
    s_err = np.abs(est["shininess"][sel][fit] / gt["shininess"][sel][fit] - 1)
    report = EvalReport(
        pixels_evaluated=int(sel.sum()), pixels_missing=int((valid & ~have).sum()),
        pixels_diffuse=int((label == DIFFUSE).sum()),
        pixels_specular=int((label == SPECULAR).sum()),
        angular_mean=_stat(np.mean, ang), angular_median=_stat(np.median, ang),
        angular_max=_stat(np.max, ang),
        depth_rmse=float(np.sqrt(np.mean(dz ** 2))) if dz.size else float("nan"),
        reflectance_mean=_stat(np.mean, rel), reflectance_median=_stat(np.median, rel),
        reflectance_max=_stat(np.max, rel), band_reflectance=bands,
        specular_pixels=int(fit.sum()), specular_beta_error=_stat(np.median, b_err),
        specular_shininess_error=_stat(np.median, s_err),
    )
    H, W = sel.shape
    ang_map = np.full((H, W), np.nan)
    ang_map[sel] = ang
    rel_map = np.full((H, W), np.nan)
    rel_map[sel] = rel
    return report, {"angular_error": ang_map, "reflectance_error": rel_map,
                    "eval": sel, "r_est": r_est, "r_gt": r_gt}


# ----------------------------------------------------------------------
# plots

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


_PNG_META = {"Software": None}


def plot_error_map(path, err: np.ndarray, title: str, vmax: float | None = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(err, cmap="viridis", vmin=0, vmax=vmax)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_axis_off()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_reflectance_curves(path, wavelengths, r_est: np.ndarray, r_gt: np.ndarray,
                            count: int = 4) -> None:
    """Estimated against ground-truth dense curves for evenly spaced pixels."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(r_gt):
        pick = np.linspace(0, len(r_gt) - 1, min(count, len(r_gt))).astype(int)
        for k, p in enumerate(pick):
            col = f"C{k}"
            ax.plot(wavelengths, r_gt[p], color=col, lw=2, alpha=0.5)
            ax.plot(wavelengths, r_est[p], color=col, ls="--")
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("reflectance")
    ax.set_title("solid: ground truth, dashed: estimate")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def write_previews(directory, est: dict, spectral: SpectralModel | None) -> list[Path]:
    """PNG previews of normals, depth and (if a spectral model is known) reflectance."""
    plt = _pyplot()
    d = Path(directory)
    mask = est["mask"].astype(bool)
    out = []
    rgb = np.where(mask[..., None], 0.5 * (est["normal"] * np.array([1, -1, -1]) + 1), 0.0)
    plt.imsave(d / "normal.png", np.clip(rgb, 0, 1), metadata=_PNG_META)
    out.append(d / "normal.png")
    z = np.where(mask, est["depth"], np.nan)
    plt.imsave(d / "depth.png", np.nan_to_num(z, nan=np.nanmax(z) if mask.any() else 0),
               cmap="magma_r", metadata=_PNG_META)
    out.append(d / "depth.png")
    if spectral is not None and mask.any():
        H, W = mask.shape
        curves = dense_reflectance(spectral, est["coefficients"][mask].astype(float))
        img = np.zeros((H, W, 3))
        img[mask] = spectra_to_rgb(curves, spectral.dense_wavelengths)
        plt.imsave(d / "reflectance.png", img, metadata=_PNG_META)
        out.append(d / "reflectance.png")
    return out


def write_report(directory, report: EvalReport, maps: dict, spectral: SpectralModel) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    report.write_csv(d / "metrics.csv")
    plot_error_map(d / "angular_error.png", maps["angular_error"], "angular error (deg)")
    plot_error_map(d / "reflectance_error.png", maps["reflectance_error"],
                   "reflectance relative RMSE")
    plot_reflectance_curves(d / "reflectance_curves.png", spectral.dense_wavelengths,
                            maps["r_est"], maps["r_gt"])
