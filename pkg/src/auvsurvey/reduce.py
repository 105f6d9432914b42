"""PCA with a fixed-count or cumulative-variance component rule."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DEFAULT_VARIANCE = 0.98
DEFAULT_FIXED = 900
_CUM_TOL = 1e-12


class PcaError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionRule:
    mode: str = "variance"  # "variance" | "fixed"
    requested: float = DEFAULT_VARIANCE
    effective_m: int | None = None

    def __post_init__(self):
        if self.mode == "variance":
            if not 0.0 < self.requested <= 1.0:
                raise PcaError(f"variance threshold must be in (0, 1], got {self.requested}")
        elif self.mode == "fixed":
            if int(self.requested) != self.requested or self.requested < 1:
                raise PcaError(f"fixed component count must be an integer >= 1, got {self.requested}")
            object.__setattr__(self, "requested", int(self.requested))
        else:
            raise PcaError(f"unknown selection mode {self.mode!r}")

    @classmethod
    def variance(cls, threshold: float = DEFAULT_VARIANCE) -> "SelectionRule":
        return cls("variance", threshold)

    @classmethod
    def fixed(cls, count: int = DEFAULT_FIXED) -> "SelectionRule":
        return cls("fixed", count)

    @classmethod
    def parse(cls, text: str | float | int) -> "SelectionRule":
        """``"0.98"`` or ``0.98`` -> variance rule, ``"900"`` or ``900`` -> fixed rule."""
        v = float(text)
        if v < 1.0 or (isinstance(text, str) and "." in text and v == 1.0):
            return cls.variance(v)
        return cls.fixed(int(v))


def select_components(variances, rule: SelectionRule) -> int:
    v = np.asarray(variances, dtype=np.float64)
    positive = int(np.count_nonzero(v > 0))
    if positive == 0:
        raise PcaError("at least one positive variance is required")
    if rule.mode == "fixed":
        return min(int(rule.requested), len(v))
    cum = np.cumsum(v) / v.sum()
    m = int(np.argmax(cum >= rule.requested - _CUM_TOL)) + 1
    return min(m, positive)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (m, D)
    explained_variance: np.ndarray  # (m,)
    explained_ratio: np.ndarray  # (m,)
    selection: SelectionRule
    spectrum: np.ndarray  # variances of every retained-capable direction, length min(n-1, D)
    n_samples: int = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def m(self) -> int:
        return self.components.shape[0]

    @property
    def total_variance(self) -> float:
        return float(self.spectrum.sum())


def _as_array(matrix) -> np.ndarray:
    data = getattr(matrix, "data", matrix)
    return np.asarray(data, dtype=np.float64)


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vt * signs[:, None]


def fit_pca(matrix, rule: SelectionRule | None = None) -> PcaModel:
    """Fit PCA by SVD of the centred data; never forms the covariance matrix.

    The component count is capped at ``min(n - 1, D)``. Each component's
    largest-magnitude coordinate is made positive.
    """
    rule = rule or SelectionRule.variance()
    x = _as_array(matrix)
    if x.ndim != 2:
        raise PcaError(f"expected a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise PcaError(f"PCA needs at least 2 rows, got {n}")
    if not np.all(np.isfinite(x)):
        raise PcaError("input contains non-finite values")

    mean = x.mean(axis=0)
    centred = x - mean
    cap = min(n - 1, d)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    spectrum = (s[:cap] ** 2) / (n - 1)
    vt = _fix_signs(vt[:cap])
    total = spectrum.sum()

    if total <= 0.0:
        # every row identical: keep one arbitrary axis with zero variance
        basis = np.zeros((1, d))
        basis[0, 0] = 1.0
        sel = SelectionRule(rule.mode, rule.requested, 1)
        return PcaModel(mean, basis, np.zeros(1), np.zeros(1), sel, np.zeros(cap), n)

    m = max(1, min(select_components(spectrum, rule), cap))
    ratio = spectrum / total
    sel = SelectionRule(rule.mode, rule.requested, m)
    return PcaModel(mean, vt[:m].copy(), spectrum[:m].copy(), ratio[:m].copy(), sel, spectrum, n)


def transform(model: PcaModel, matrix) -> np.ndarray:
    x = _as_array(matrix)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise PcaError(f"expected dimension {model.dim}, got {x.shape[1]}")
    return (x - model.mean) @ model.components.T


def inverse_transform(model: PcaModel, reduced) -> np.ndarray:
    z = np.asarray(reduced, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != model.m:
        raise PcaError(f"expected width {model.m}, got {z.shape[1]}")
    return z @ model.components + model.mean


def project_for_viz(matrix, dims: int = 2) -> np.ndarray:
    """2-D or 3-D coordinates for plotting; padded with zero columns if rank is lower."""
    if dims not in (2, 3):
        raise PcaError(f"visualization dims must be 2 or 3, got {dims}")
    x = _as_array(matrix)
    model = fit_pca(x, SelectionRule.fixed(dims))
    z = transform(model, x)
    if z.shape[1] < dims:
        z = np.hstack([z, np.zeros((z.shape[0], dims - z.shape[1]))])
    return z


# ---------------------------------------------------------------------------
# persistence: JSON header line, then little-endian float32 mean and components


def save_pca(model: PcaModel, path: str | os.PathLike) -> None:
    header = {
        "dim": model.dim,
        "m": model.m,
        "n_samples": model.n_samples,
        "selection": asdict(model.selection),
        "explained_variance": model.explained_variance.tolist(),
        "explained_ratio": model.explained_ratio.tolist(),
        "spectrum": model.spectrum.tolist(),
    }
    body = model.mean.astype("<f4").tobytes() + model.components.astype("<f4").tobytes()
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body)


def load_pca(path: str | os.PathLike) -> PcaModel:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    h = json.loads(raw[:nl])
    d, m = int(h["dim"]), int(h["m"])
    expected = 4 * d * (m + 1)
    if len(raw) - nl - 1 != expected:
        raise PcaError(f"{path}: body is {len(raw) - nl - 1} bytes, expected {expected}")
    block = np.frombuffer(raw, dtype="<f4", offset=nl + 1).astype(np.float64)
    sel = h["selection"]
    return PcaModel(
        mean=block[:d],
        components=block[d:].reshape(m, d),
        explained_variance=np.array(h["explained_variance"]),
        explained_ratio=np.array(h["explained_ratio"]),
        selection=SelectionRule(sel["mode"], sel["requested"], sel.get("effective_m")),
        spectrum=np.array(h.get("spectrum", h["explained_variance"])),
        n_samples=int(h.get("n_samples", 0)),
    )
