"""Spectral illumination, camera response and the linear reflectance basis.

Band ``j`` covers ``k`` samples centred on the ring wavelength, spaced by the
integration step.  Everything the pipeline needs per band reduces to two
precomputed quantities: ``W[:, j] = B_j E_j Q_j`` (diffuse, one entry per basis
function) and ``JEQ[j] = sum(E_j Q_j)`` (specular, illumination coloured).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
import logging

import numpy as np

log = logging.getLogger(__name__)


class SpectralError(ValueError):
    pass


def load_table(path) -> np.ndarray:
    """Read a whitespace table (``#`` comments) with wavelength in column 0.

    ``builtin:<name>`` refers to the tables shipped with the package.
    """
    path = str(path)
    if path.startswith("builtin:"):
        ref = resources.files("cmslf") / "data" / path.split(":", 1)[1]
        text = ref.read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(x) for x in line.replace(",", " ").split()])
        except ValueError as exc:
            raise SpectralError(f"{path}:{lineno}: {exc}") from None
    table = np.array(rows)
    if table.ndim != 2 or table.shape[1] < 2:
        raise SpectralError(f"{path}: expected at least two columns")
    if np.any(np.diff(table[:, 0]) <= 0):
        raise SpectralError(f"{path}: wavelengths must be increasing")
    return table


def _resample(table: np.ndarray, grid: np.ndarray) -> np.ndarray:
    lam = table[:, 0]
    if grid[0] < lam[0] - 1e-9 or grid[-1] > lam[-1] + 1e-9:
        raise SpectralError(
            f"table covers {lam[0]}-{lam[-1]} nm, need {grid[0]}-{grid[-1]} nm")
    return np.stack([np.interp(grid, lam, table[:, c]) for c in range(1, table.shape[1])])


@dataclass(frozen=True)
class SpectralModel:
    """Per-band spectral terms on a regular wavelength grid.

    Attributes
    ----------
    dense_wavelengths : (K,) sample grid of the full range.
    basis : (w, K) reflectance basis on the dense grid.
    band_centers : (m,) ring wavelengths.
    band_index : (m, k) dense-grid indices of each band window.
    illumination : (m, k) diagonal of ``E_j``.
    response : (m, k) camera response ``Q_j``.
    """

    dense_wavelengths: np.ndarray
    basis: np.ndarray
    band_centers: np.ndarray
    band_index: np.ndarray
    illumination: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        m, k = self.band_index.shape
        if self.illumination.shape != (m, k) or self.response.shape != (m, k):
            raise SpectralError("illumination/response must be (m, k)")
        if self.basis.shape[1] != self.dense_wavelengths.size:
            raise SpectralError("basis does not match the dense grid")
        if np.any(self.illumination < 0) or np.any(self.response < 0):
            raise SpectralError("illumination and response must be nonnegative")
        if np.any(self.JEQ <= 0):
            raise SpectralError("every band needs positive integrated illumination")
        W = self.W
        if np.linalg.matrix_rank(W) < min(W.shape):
            log.warning("W has rank %d < %d; reflectance solve is ill-posed",
                        np.linalg.matrix_rank(W), min(W.shape))

    @property
    def num_bands(self) -> int:
        return self.band_index.shape[0]

    @property
    def band_samples(self) -> int:
        return self.band_index.shape[1]

    @property
    def basis_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def sample_step(self) -> float:
        return float(self.dense_wavelengths[1] - self.dense_wavelengths[0])

    def band_basis(self, j: int) -> np.ndarray:
        """``B_j``: (w, k) restriction of the basis to band ``j``."""
        return self.basis[:, self.band_index[j]]

    def band_wavelengths(self, j: int) -> np.ndarray:
        return self.dense_wavelengths[self.band_index[j]]

    @property
    def W(self) -> np.ndarray:
        return compute_W(self)

    @property
    def JEQ(self) -> np.ndarray:
        return np.sum(self.illumination * self.response, axis=1)

    def to_dict(self) -> dict:
        return {
            "dense_wavelengths": self.dense_wavelengths.tolist(),
            "basis": self.basis.tolist(),
            "band_centers": self.band_centers.tolist(),
            "band_index": self.band_index.tolist(),
            "illumination": self.illumination.tolist(),
            "response": self.response.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralModel":
        return cls(
            dense_wavelengths=np.asarray(d["dense_wavelengths"], dtype=float),
            basis=np.asarray(d["basis"], dtype=float),
            band_centers=np.asarray(d["band_centers"], dtype=float),
            band_index=np.asarray(d["band_index"], dtype=int),
            illumination=np.asarray(d["illumination"], dtype=float),
            response=np.asarray(d["response"], dtype=float),
        )


def build_spectral_model(
    band_centers,
    sample_step: float = 5.0,
    band_samples: int = 5,
    dense_range=(400.0, 700.0),
    basis="builtin:basis_cosine3.txt",
    response="builtin:camera_response.txt",
    illumination_sigma: float = 8.0,
    illumination_power: float = 1.0e4,
    illumination_file=None,
) -> SpectralModel:
    """Assemble a model from tables and Gaussian narrowband light profiles.

    ``illumination_file`` (optional) holds one column per band, sampled over
    the dense range; otherwise each light is a Gaussian of width
    ``illumination_sigma`` nm scaled by ``illumination_power``.
    """
    if band_samples < 1 or band_samples % 2 == 0:
        raise SpectralError("band_samples must be a positive odd integer")
    centers = np.asarray(band_centers, dtype=float)
    lo, hi = dense_range
    K = int(round((hi - lo) / sample_step)) + 1
    grid = lo + sample_step * np.arange(K)
    half = (band_samples - 1) // 2
    pos = (centers - lo) / sample_step
    if np.any(np.abs(pos - np.round(pos)) > 1e-9):
        raise SpectralError("band centres must fall on the dense sample grid")
    idx = np.round(pos).astype(int)[:, None] + np.arange(-half, half + 1)[None, :]
    if idx.min() < 0 or idx.max() >= K:
        raise SpectralError("a band window extends beyond the dense range")

    B = basis if isinstance(basis, np.ndarray) else _resample(load_table(basis), grid)
    Q = response if isinstance(response, np.ndarray) else _resample(load_table(response), grid)[0]
    if illumination_file is not None:
        E_dense = _resample(load_table(illumination_file), grid)
        if E_dense.shape[0] != centers.size:
            raise SpectralError("illumination file needs one column per band")
        E = np.stack([E_dense[j, idx[j]] for j in range(centers.size)])
    else:
        lam = grid[idx]
        E = illumination_power * np.exp(-0.5 * ((lam - centers[:, None]) / illumination_sigma) ** 2)
    return SpectralModel(
        dense_wavelengths=grid,
        basis=np.asarray(B, dtype=float),
        band_centers=centers,
        band_index=idx,
        illumination=E,
        response=Q[idx],
    )


def spectral_from_config(cfg: dict, band_centers) -> SpectralModel:
    cfg = dict(cfg or {})
    if "dense_wavelengths" in cfg:
        return SpectralModel.from_dict(cfg)
    illum = cfg.pop("illumination", {}) or {}
    return build_spectral_model(
        band_centers,
        sample_step=cfg.get("sample_step", 5.0),
        band_samples=cfg.get("band_samples", 5),
        dense_range=tuple(cfg.get("dense_range", (400.0, 700.0))),
        basis=cfg.get("basis", "builtin:basis_cosine3.txt"),
        response=cfg.get("response", "builtin:camera_response.txt"),
        illumination_sigma=illum.get("sigma_nm", 8.0),
        illumination_power=illum.get("power", 1.0e4),
        illumination_file=illum.get("file"),
    )


def compute_W(model: SpectralModel) -> np.ndarray:
    """(w, m) matrix whose column ``j`` is ``B_j E_j Q_j``."""
    cols = [model.band_basis(j) @ (model.illumination[j] * model.response[j])
            for j in range(model.num_bands)]
    return np.stack(cols, axis=1)


def reflectance_at_band(model: SpectralModel, c, j: int):
    """Band reflectance ``c B_j`` and the diffuse response ``c . W_j``."""
    c = np.asarray(c, dtype=float)
    R_band = c @ model.band_basis(j)
    return R_band, float(R_band @ (model.illumination[j] * model.response[j]))


def dense_reflectance(model: SpectralModel, c) -> np.ndarray:
    """Full-range reflectance ``c B``; ``c`` may carry leading batch axes."""
    return np.asarray(c, dtype=float) @ model.basis


def check_nonnegative(model: SpectralModel, c) -> bool:
    return bool(np.all(dense_reflectance(model, c) >= -1e-12))


def cie_rgb(wavelengths) -> np.ndarray:
    """Linear sRGB weights (3, len) at the given wavelengths from the CIE table."""
    table = load_table("builtin:cie1931_2deg.txt")
    xyz = _resample(table, np.asarray(wavelengths, dtype=float))
    m = np.array([[3.2406, -1.5372, -0.4986],
                  [-0.9689, 1.8758, 0.0415],
                  [0.0557, -0.2040, 1.0570]])
    return m @ xyz


def spectra_to_rgb(values: np.ndarray, wavelengths) -> np.ndarray:
    """Map ``(..., L)`` spectral samples to gamma-encoded sRGB in ``[0, 1]``."""
    w = cie_rgb(wavelengths)
    white = w.sum(axis=1)
    rgb = (np.asarray(values) @ w.T) / white
    rgb = np.clip(rgb, 0.0, None)
    peak = rgb.max()
    if peak > 0:
        rgb = rgb / peak
    return np.where(rgb <= 0.0031308, 12.92 * rgb, 1.055 * np.power(rgb, 1 / 2.4) - 0.055)
