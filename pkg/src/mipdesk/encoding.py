"""Positional encodings of points and of Gaussian regions.

Feature layout (shared by every encoder here)::

    [ sin block | cos block ],   block index = j * 3 + i

for frequency ``2**j`` (j = 0..L-1) and coordinate ``i``. So the scalar for
(frequency j, dimension i, cos) lives at ``3 * L + 3 * j + i``.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import GaussianRegion

VARIANTS = ("PE", "IPE", "ConcatPE")


@dataclass(frozen=True)
class EncodingConfig:
    L: int = 16
    L_dir: int = 4
    variant: str = "IPE"

    def __post_init__(self):
        if self.L < 1 or self.L_dir < 1:
            raise ValueError("encoding degrees must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def dim(self):
        if self.variant == "ConcatPE":
            return concat_feature_dim()
        return 6 * self.L

    @property
    def dir_dim(self):
        return 6 * self.L_dir


def feature_index(L, j, i, trig):
    """Position of (frequency j, dimension i, 'sin'|'cos') in a PE/IPE vector."""
    return (0 if trig == "sin" else 3 * L) + 3 * j + i


def _lift(x, L):
    scales = 2.0 ** np.arange(L)
    x = np.asarray(x, dtype=np.float64)
    return (x[..., None, :] * scales[:, None]).reshape(*x.shape[:-1], x.shape[-1] * L)


def _sincos(y, dtype):
    if dtype == np.float64:
        return np.sin(y), np.cos(y)
    # Reduce in float64 so high-frequency arguments keep their phase, then
    # evaluate in the (cheaper) target precision.
    y = (y - (2 * np.pi) * np.rint(y * (0.5 / np.pi))).astype(dtype)
    return np.sin(y), np.cos(y)


def positional_encode(x, L, dtype=np.float64):
    """sin/cos of ``2**j * x`` for j < L; x has shape (..., d)."""
    s, c = _sincos(_lift(x, L), dtype)
    return np.concatenate([s, c], axis=-1)


def expected_trig(mu, var):
    """(E[sin x], E[cos x]) for x ~ N(mu, var)."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    att = np.exp(-0.5 * var)
    return np.sin(mu) * att, np.cos(mu) * att


def ipe(mean, cov_diag, L, dtype=np.float64):
    """Integrated positional encoding from means and covariance diagonals."""
    cov_diag = np.asarray(cov_diag, dtype=np.float64)
    if np.any(cov_diag < 0):
        raise ValueError("cov_diag must be nonnegative")
    y = _lift(mean, L)
    y_var = (cov_diag[..., None, :] * (4.0 ** np.arange(L))[:, None]).reshape(y.shape)
    s, c = _sincos(y, dtype)
    att = np.exp(-0.5 * y_var.astype(dtype))
    return np.concatenate([s * att, c * att], axis=-1)


def integrated_positional_encode(region: GaussianRegion, L):
    return ipe(region.mean, region.cov_diag, L)


def triu_signed_sqrt(cov):
    """Signed square root of the upper-triangular entries, row-major order.

    For 3x3 this is (00, 01, 02, 11, 12, 22).
    """
    cov = np.asarray(cov, dtype=np.float64)
    rows, cols = np.triu_indices(cov.shape[-1])
    v = cov[..., rows, cols]
    return np.sign(v) * np.sqrt(np.abs(v))


CONCAT_MEAN_L = 12
CONCAT_COV_L = 2


def concat_feature_dim():
    return 2 * 3 * CONCAT_MEAN_L + 2 * 6 * CONCAT_COV_L


def concat_positional_encode(region: GaussianRegion):
    """PE of the mean (L=12) next to PE of the signed-sqrt covariance (L=2)."""
    if region.cov is None:
        raise ValueError("concatenated encoding needs the full covariance")
    mean_pe = positional_encode(region.mean, CONCAT_MEAN_L)
    cov_pe = positional_encode(triu_signed_sqrt(region.cov), CONCAT_COV_L)
    return np.concatenate([mean_pe, cov_pe], axis=-1)

