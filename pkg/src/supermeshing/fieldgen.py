"""Synthetic low/high mesh-density stress-field pairs.

Two sources:

* ``kirsch`` - closed-form von Mises stress around a circular hole in a
  plate under uniaxial tension (fast, exact, sharp features at the rim);
* ``poisson`` - a five-point finite-difference solve of -lap(u) = f with
  zero Dirichlet boundary, run once on the fine grid and once on the coarse
  grid, so the pair differs by genuine discretisation error.  As in the
  Prandtl torsion analogy, u is a stress function and the stored field is
  the stress magnitude |grad u|.

Pairs are min-max normalised jointly and persisted in a small binary
container (``*.smds``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, NumericError, ParameterError

GENERATORS = ("kirsch", "poisson")
MODES = ("sample", "solve")
VALID_SCALES = (2, 4, 8)


@dataclass
class SamplePair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lr = np.ascontiguousarray(self.lr, dtype=np.float32)
        self.hr = np.ascontiguousarray(self.hr, dtype=np.float32)
        h, w = self.lr.shape
        if self.hr.shape != (h * self.scale, w * self.scale):
            raise ParameterError(
                f"hr shape {self.hr.shape} is not lr shape {self.lr.shape} x scale {self.scale}")


@dataclass
class Dataset:
    pairs: list[SamplePair]
    lr_shape: tuple[int, int]
    scale: int
    norm_min: float = 0.0
    norm_max: float = 1.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def hr_shape(self) -> tuple[int, int]:
        return (self.lr_shape[0] * self.scale, self.lr_shape[1] * self.scale)

    def lr_array(self, indices=None) -> np.ndarray:
        idx = range(len(self.pairs)) if indices is None else indices
        return np.stack([self.pairs[i].lr for i in idx])[:, None]

    def hr_array(self, indices=None) -> np.ndarray:
        idx = range(len(self.pairs)) if indices is None else indices
        return np.stack([self.pairs[i].hr for i in idx])[:, None]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.pairs[i] for i in indices], self.lr_shape, self.scale,
                       self.norm_min, self.norm_max, dict(self.meta))


# ---------------------------------------------------------------------------
# Kirsch plate with a hole
# ---------------------------------------------------------------------------

def kirsch_stresses(r, theta, stress: float, radius: float):
    """Polar stress components (sigma_rr, sigma_tt, tau_rt) for r >= radius.

    ``theta`` is measured from the loading axis.
    """
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    q2 = (radius / r) ** 2
    q4 = q2 * q2
    c2 = np.cos(2.0 * theta)
    s2 = np.sin(2.0 * theta)
    half = 0.5 * stress
    srr = half * (1.0 - q2) + half * (1.0 - 4.0 * q2 + 3.0 * q4) * c2
    stt = half * (1.0 + q2) - half * (1.0 + 3.0 * q4) * c2
    trt = -half * (1.0 + 2.0 * q2 - 3.0 * q4) * s2
    return srr, stt, trt


def von_mises(srr, stt, trt):
    return np.sqrt(srr * srr - srr * stt + stt * stt + 3.0 * trt * trt)


def kirsch_field(stress: float = 100.0, radius: float = 0.2, extent: float = 1.0,
                 angle: float = 0.0, resolution: int = 64) -> np.ndarray:
    """Von Mises stress on a ``resolution``^2 grid of cell centres over
    [-extent, extent]^2, load axis rotated by ``angle`` radians; zero in the hole."""
    if resolution < 8:
        raise ParameterError(f"resolution must be >= 8, got {resolution}")
    if not 0 < radius < extent:
        raise ParameterError(f"hole radius {radius} must be positive and below the half-extent {extent}")
    centres = (np.arange(resolution) + 0.5) / resolution * (2.0 * extent) - extent
    x, y = np.meshgrid(centres, centres[::-1])
    r = np.hypot(x, y)
    theta = np.arctan2(y, x) - angle
    inside = r < radius
    r_safe = np.where(inside, radius, r)
    vm = von_mises(*kirsch_stresses(r_safe, theta, stress, radius))
    return np.where(inside, 0.0, vm)


# ---------------------------------------------------------------------------
# Poisson solver
# ---------------------------------------------------------------------------

def _apply_laplacian(u: np.ndarray, inv_h2: float) -> np.ndarray:
    """-lap(u) on the interior unknowns (u is (n-2)x(n-2), zero boundary implied)."""
    out = 4.0 * u
    out[1:, :] -= u[:-1, :]
    out[:-1, :] -= u[1:, :]
    out[:, 1:] -= u[:, :-1]
    out[:, :-1] -= u[:, 1:]
    return out * inv_h2


def poisson_solve(f: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Solve -lap(u) = f on the unit square, n x n nodes, u = 0 on the boundary.

    ``f`` is sampled at the nodes (boundary values are ignored).  Conjugate
    gradients on the five-point stencil, stopped when the residual 2-norm
    falls below ``rtol * ||f_interior||``.
    """
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[0]
    if f.ndim != 2 or f.shape[1] != n or n < 3:
        raise ParameterError(f"source must be an n x n grid with n >= 3, got {f.shape}")
    h = 1.0 / (n - 1)
    inv_h2 = 1.0 / (h * h)
    b = f[1:-1, 1:-1].copy()
    u = np.zeros(n * n).reshape(n, n)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return u
    if max_iter is None:
        max_iter = 10 * n * n
    tol = rtol * b_norm

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(np.vdot(r, r))
    for _ in range(max_iter):
        if math.sqrt(rr) <= tol:
            break
        ap = _apply_laplacian(p, inv_h2)
        alpha = rr / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.vdot(r, r))
        p *= rr_new / rr
        p += r
        rr = rr_new
    else:
        if math.sqrt(rr) > tol:
            raise NumericError(
                f"conjugate gradient did not converge in {max_iter} iterations", math.sqrt(rr))
    u[1:-1, 1:-1] = x
    return u


def laplacian_matrix(n: int) -> np.ndarray:
    """Dense -lap matrix on the (n-2)^2 interior unknowns (row-major order)."""
    m = n - 2
    h = 1.0 / (n - 1)
    t = 2.0 * np.eye(m) - np.eye(m, k=1) - np.eye(m, k=-1)
    eye = np.eye(m)
    return (np.kron(eye, t) + np.kron(t, eye)) / (h * h)


def stress_magnitude(u: np.ndarray) -> np.ndarray:
    """|grad u| by second-order differences (one-sided at the boundary)."""
    h = 1.0 / (u.shape[0] - 1)
    gx, gy = np.gradient(u, h, edge_order=2)
    return np.hypot(gx, gy)


def node_grid(n: int):
    c = np.linspace(0.0, 1.0, n)
    return np.meshgrid(c, c, indexing="ij")


@dataclass
class BumpSource:
    """Sum of Gaussian bumps; amplitudes scale with 1/width^2 so u stays O(1)."""

    centres: np.ndarray
    widths: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator) -> "BumpSource":
        k = int(rng.integers(2, 6))
        return cls(centres=rng.uniform(0.15, 0.85, size=(k, 2)),
                   widths=rng.uniform(0.04, 0.12, size=k),
                   amplitudes=rng.uniform(-1.0, 1.0, size=k))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        f = np.zeros_like(x)
        for (cx, cy), w, a in zip(self.centres, self.widths, self.amplitudes):
            d2 = (x - cx) ** 2 + (y - cy) ** 2
            f += a / (w * w) * np.exp(-0.5 * d2 / (w * w))
        return f

    def sample(self, n: int) -> np.ndarray:
        return self(*node_grid(n))


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------

def block_average(a: np.ndarray, scale: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // scale, scale, w // scale, scale).mean(axis=(1, 3))


def _check_sizes(hr_size: int, scale: int) -> None:
    if scale not in VALID_SCALES:
        raise ParameterError(f"scale must be one of {VALID_SCALES}, got {scale}")
    if hr_size % 16 or hr_size % scale:
        valid = [16 * k for k in range(1, 17)]
        raise ParameterError(
            f"hr size {hr_size} must be divisible by 16 and by scale {scale}; valid sizes: {valid}")


def random_params(generator: str, rng: np.random.Generator) -> dict:
    if generator == "kirsch":
        return {"stress": float(rng.uniform(50.0, 150.0)),
                "radius": float(rng.uniform(0.1, 0.35)),
                "extent": 1.0,
                "angle": float(rng.uniform(0.0, math.pi))}
    if generator == "poisson":
        src = BumpSource.random(rng)
        return {"centres": src.centres.tolist(), "widths": src.widths.tolist(),
                "amplitudes": src.amplitudes.tolist()}
    raise ParameterError(f"unknown generator {generator!r}; choose from {GENERATORS}")


def make_pair(generator: str, params: dict, hr_size: int, scale: int,
              mode: str = "sample") -> SamplePair:
    """Build one aligned pair.

    ``sample``: hr generated at full resolution, lr = block average of hr.
    ``solve`` (poisson only): lr and hr are independent coarse/fine solves.
    """
    _check_sizes(hr_size, scale)
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    lr_size = hr_size // scale
    if generator == "kirsch":
        if mode == "solve":
            raise ParameterError("solve mode needs the poisson generator")
        hr = kirsch_field(resolution=hr_size, **params)
        lr = block_average(hr, scale)
    elif generator == "poisson":
        src = BumpSource(np.asarray(params["centres"]), np.asarray(params["widths"]),
                         np.asarray(params["amplitudes"]))
        hr = stress_magnitude(poisson_solve(src.sample(hr_size)))
        if mode == "solve":
            lr = stress_magnitude(poisson_solve(src.sample(lr_size)))
        else:
            lr = block_average(hr, scale)
    else:
        raise ParameterError(f"unknown generator {generator!r}; choose from {GENERATORS}")
    return SamplePair(lr, hr, scale, {"generator": generator, "mode": mode, "params": params})


def generate_pairs(generator: str, count: int, hr_size: int, scale: int, mode: str = "sample",
                   seed: int = 0) -> list[SamplePair]:
    """``count`` raw (unnormalised) pairs; pair i uses the i-th child of ``seed``."""
    _check_sizes(hr_size, scale)
    children = np.random.SeedSequence(seed).spawn(count)
    pairs = []
    for i, child in enumerate(children):
        params = random_params(generator, np.random.default_rng(child))
        pair = make_pair(generator, params, hr_size, scale, mode)
        pair.source["index"] = i
        pair.source["seed"] = seed
        pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def normalize(pairs: list[SamplePair]) -> tuple[list[SamplePair], tuple[float, float]]:
    """Joint min-max scaling of all lr and hr values to [0, 1].

    A constant dataset maps to 0.5 everywhere.
    """
    if not pairs:
        raise DataError("normalize needs at least one pair")
    lo, hi = math.inf, -math.inf
    for i, p in enumerate(pairs):
        for arr in (p.lr, p.hr):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"sample {i} contains non-finite values")
            lo = min(lo, float(arr.min()))
            hi = max(hi, float(arr.max()))
    out = [SamplePair(normalize_array(p.lr, lo, hi), normalize_array(p.hr, lo, hi), p.scale,
                      dict(p.source)) for p in pairs]
    return out, (lo, hi)


def normalize_array(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if hi == lo:
        return np.full(a.shape, 0.5, dtype=np.float32)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def denormalize_array(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if hi == lo:
        return np.full(a.shape, lo)
    return a * (hi - lo) + lo


def build_dataset(generator: str, count: int, hr_size: int, scale: int, mode: str = "sample",
                  seed: int = 0) -> Dataset:
    pairs = generate_pairs(generator, count, hr_size, scale, mode, seed)
    meta = {"generator": generator, "mode": mode, "seed": seed, "hr": hr_size}
    lr_shape = (hr_size // scale, hr_size // scale)
    if not pairs:
        return Dataset([], lr_shape, scale, 0.0, 1.0, meta)
    pairs, (lo, hi) = normalize(pairs)
    for p in pairs:
        p.source = {}
    return Dataset(pairs, lr_shape, scale, lo, hi, meta)


# ---------------------------------------------------------------------------
# .smds container
# ---------------------------------------------------------------------------

MAGIC = b"SMDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIddI")


def write_dataset(path, dataset: Dataset) -> None:
    """Header, UTF-8 JSON metadata, then per record lr and hr as little-endian f32."""
    h, w = dataset.lr_shape
    meta = json.dumps(dataset.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, len(dataset.pairs), h, w, dataset.scale,
                          float(dataset.norm_min), float(dataset.norm_max), len(meta))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta)
        for p in dataset.pairs:
            fh.write(p.lr.astype("<f4").tobytes())
            fh.write(p.hr.astype("<f4").tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, count, h, w, scale, lo, hi, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    if scale not in VALID_SCALES:
        raise FormatError(f"invalid scale {scale}", 20)
    offset = _HEADER.size
    if len(raw) < offset + meta_len:
        raise FormatError("truncated metadata", len(raw))
    try:
        meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", offset) from None
    offset += meta_len
    n_lr = h * w
    n_hr = n_lr * scale * scale
    record = 4 * (n_lr + n_hr)
    expected = offset + count * record
    if len(raw) != expected:
        where = min(len(raw), expected)
        raise FormatError(f"declared {count} records need {expected} bytes, file has {len(raw)}",
                          where)
    data = np.frombuffer(raw, dtype="<f4", offset=offset, count=count * (n_lr + n_hr))
    data = data.reshape(count, n_lr + n_hr)
    pairs = [SamplePair(row[:n_lr].reshape(h, w).astype(np.float32),
                        row[n_lr:].reshape(h * scale, w * scale).astype(np.float32), scale)
             for row in data]
    return Dataset(pairs, (h, w), scale, lo, hi, meta)


# ---------------------------------------------------------------------------
# CSV grids
# ---------------------------------------------------------------------------

def read_grid_csv(path) -> np.ndarray:
    """Row-major grid; first line holds the dimensions ``h,w``."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty grid file", 0)
    try:
        h, w = (int(v) for v in lines[0].split(","))
        rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
        grid = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed grid ({exc})", 0) from None
    if grid.shape != (h, w):
        raise FormatError(f"{path}: header declares {h}x{w} but body is {grid.shape}", 0)
    return grid


def write_grid_csv(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    h, w = grid.shape
    lines = [f"{h},{w}"]
    lines += [",".join(repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def import_csv_pairs(directory, scale: int) -> list[SamplePair]:
    """Pairs from ``<case>_lr.csv`` / ``<case>_hr.csv`` files, sorted by case name."""
    directory = Path(directory)
    pairs = []
    for lr_path in sorted(directory.glob("*_lr.csv")):
        hr_path = lr_path.with_name(lr_path.name[:-len("_lr.csv")] + "_hr.csv")
        if not hr_path.exists():
            raise FormatError(f"{lr_path.name} has no matching {hr_path.name}")
        pairs.append(SamplePair(read_grid_csv(lr_path), read_grid_csv(hr_path), scale,
                                {"generator": "csv", "case": lr_path.name[:-len("_lr.csv")]}))
    return pairs
