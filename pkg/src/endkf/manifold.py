"""Exponential, logarithmic and tangent-projection maps.

Points are plain float arrays whose last axis is the embedding coordinate,
so every map works on a single point of shape ``(n,)`` or on a whole
ensemble of shape ``(N, n)`` without change.

Product manifolds are described by a :class:`Layout`, an ordered tuple of
Euclidean (``"E"``) and spherical (``"S"``) blocks laid out contiguously in
the embedding vector.  The canonical pose layout is ``[v, p, wd, w]`` with
``v, p`` in R^3 and the angular-velocity and attitude versors on S^3, with
the bias blocks ``[b, beta]`` appended when the constant-bias model is used.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

EUCLID = "E"
SPHERE = "S"

# sphere_exp: tangent residual that is silently projected away
TANGENT_TOL = 1e-6
ANTIPODAL_TOL = 1e-9
ZERO_TANGENT = 1e-12


class ManifoldError(ValueError):
    pass


class AntipodalError(ManifoldError):
    """The sphere logarithm is undefined between antipodal points."""


class NotTangentError(ManifoldError):
    pass


def _as_float(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ManifoldError(f"{name} contains non-finite entries")
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ManifoldError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)[..., None]


def _norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(_dot(a, a))


# ---------------------------------------------------------------------------
# Euclidean space
# ---------------------------------------------------------------------------

def euclid_exp(x, v) -> np.ndarray:
    x, v = _as_float(x, "x"), _as_float(v, "v")
    _check_dims(x, v)
    return x + v


def euclid_log(x1, x2) -> np.ndarray:
    x1, x2 = _as_float(x1, "x1"), _as_float(x2, "x2")
    _check_dims(x1, x2)
    return x2 - x1


def euclid_proj(x, v) -> np.ndarray:
    x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
    _check_dims(x, v)
    return v.copy()


# ---------------------------------------------------------------------------
# Unit sphere
# ---------------------------------------------------------------------------

def normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x / _norm(x)


def sphere_proj(x, w) -> np.ndarray:
    """Remove the component of ``w`` normal to the sphere at ``x``."""
    x, w = np.asarray(x, dtype=float), np.asarray(w, dtype=float)
    _check_dims(x, w)
    return w - x * _dot(x, w)


def sphere_exp(x, v) -> np.ndarray:
    """Follow the great circle from ``x`` along tangent ``v`` for ``|v|`` radians.

    Tangent residuals up to ``TANGENT_TOL`` are projected away; larger ones
    raise :class:`NotTangentError`.
    """
    x, v = _as_float(x, "x"), _as_float(v, "v")
    _check_dims(x, v)
    resid = np.abs(_dot(x, v))
    if np.any(resid > TANGENT_TOL):
        raise NotTangentError(f"tangent residual {resid.max():.3e} exceeds {TANGENT_TOL}")
    v = v - x * _dot(x, v)
    theta = _norm(v)
    small = theta < ZERO_TANGENT
    safe = np.where(small, 1.0, theta)
    out = np.cos(theta) * x + np.sin(theta) * v / safe
    out = np.where(small, x, out)
    return normalize(out)


def sphere_log(x1, x2) -> np.ndarray:
    """Tangent vector at ``x1`` pointing along the geodesic to ``x2``.

    The angle is evaluated as ``atan2(|P(x2 - x1)|, x1.x2)``, which equals
    the clamped arc cosine but stays accurate for nearly coincident points.
    """
    x1, x2 = _as_float(x1, "x1"), _as_float(x2, "x2")
    _check_dims(x1, x2)
    c = _dot(x1, x2)
    if np.any(c < -1.0 + ANTIPODAL_TOL):
        raise AntipodalError("sphere_log of (nearly) antipodal points")
    c = np.clip(c, -1.0, 1.0)
    # P_{x1}(x2 - x1) = x2 - x1 (x1.x2) since P_{x1}(x1) = 0
    d = x2 - x1 * c
    s = _norm(d)
    zero = s < 1e-15
    theta = np.arctan2(s, c)
    return np.where(zero, 0.0, theta * d / np.where(zero, 1.0, s))


# ---------------------------------------------------------------------------
# Product manifolds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    name: str
    kind: str
    start: int
    size: int

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


@dataclass(frozen=True)
class Layout:
    blocks: tuple[Block, ...]

    @classmethod
    def of(cls, *spec: tuple[str, str, int]) -> "Layout":
        blocks, start = [], 0
        for name, kind, size in spec:
            if kind not in (EUCLID, SPHERE):
                raise ValueError(f"unknown block kind {kind!r}")
            blocks.append(Block(name, kind, start, size))
            start += size
        return cls(tuple(blocks))

    @property
    def dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(kinds, starts, sizes) as intp arrays, kind 0 = Euclid, 1 = sphere."""
        return _layout_arrays(self)

    def normalize_spheres(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        for b in self.blocks:
            if b.kind == SPHERE:
                x[..., b.slice] = normalize(x[..., b.slice])
        return x


@lru_cache(maxsize=None)
def _layout_arrays(layout: Layout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    kinds = np.array([0 if b.kind == EUCLID else 1 for b in layout.blocks], dtype=np.intp)
    starts = np.array([b.start for b in layout.blocks], dtype=np.intp)
    sizes = np.array([b.size for b in layout.blocks], dtype=np.intp)
    for a in (kinds, starts, sizes):
        a.setflags(write=False)
    return kinds, starts, sizes


POSE = Layout.of(("v", EUCLID, 3), ("p", EUCLID, 3), ("wd", SPHERE, 4), ("w", SPHERE, 4))
POSE_BIAS = Layout.of(
    ("v", EUCLID, 3), ("p", EUCLID, 3), ("wd", SPHERE, 4), ("w", SPHERE, 4),
    ("b", EUCLID, 3), ("beta", SPHERE, 4),
)
# observation space: [position, attitude]
OBS = Layout.of(("p", EUCLID, 3), ("w", SPHERE, 4))


def layout_for(dim: int) -> Layout:
    if dim == POSE.dim:
        return POSE
    if dim == POSE_BIAS.dim:
        return POSE_BIAS
    raise ManifoldError(f"no canonical pose layout of dimension {dim}")


_EXP = {EUCLID: euclid_exp, SPHERE: sphere_exp}
_LOG = {EUCLID: euclid_log, SPHERE: sphere_log}
_PROJ = {EUCLID: euclid_proj, SPHERE: sphere_proj}


def _blockwise(table, layout: Layout, a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape[-1] != layout.dim or b.shape[-1] != layout.dim:
        raise ManifoldError(
            f"layout mismatch: expected dimension {layout.dim}, got {a.shape[-1]} and {b.shape[-1]}"
        )
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    for blk in layout:
        s = blk.slice
        out[..., s] = table[blk.kind](a[..., s], b[..., s])
    return out


def product_exp(layout: Layout, x, v) -> np.ndarray:
    return _blockwise(_EXP, layout, x, v)


def product_log(layout: Layout, x1, x2) -> np.ndarray:
    return _blockwise(_LOG, layout, x1, x2)


def product_proj(layout: Layout, x, w) -> np.ndarray:
    return _blockwise(_PROJ, layout, x, w)
