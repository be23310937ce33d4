"""Statistical shape models and their JSON file format.

Two kinds of model are supported: a PCA model (mean + linear basis) used
for the palate, and a bilinear model for the tongue whose displacement is
a sum x_i * y_j * c_ij over an anatomy weight x and a pose weight y.
Weights are expressed in training-standard-deviation units via the sigma
vectors, so regularization terms stay dimensionless.

Real models exported to the documented JSON schema load here unchanged;
for desk-scale testing `generate_synthetic_model` / `generate_synthetic_palate`
build smooth deterministic stand-ins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FormatError
from .geometry import Mesh

MODEL_FORMAT = "articfeed-model"
MODEL_VERSION = 1
MODEL_AXES = "+x left,+y anterior,+z superior"


def _vec(a, name: str) -> np.ndarray:
    v = np.ascontiguousarray(np.asarray(a, dtype=np.float64)).reshape(-1)
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class PcaModel:
    """Linear model: vertices = mean + basis @ x, x in sigma units."""

    mean: np.ndarray  # (3V,)
    basis: np.ndarray  # (3V, n)
    sigmas: np.ndarray  # (n,)
    faces: np.ndarray  # (F, 3)

    def __post_init__(self):
        mean = _vec(self.mean, "mean")
        basis = np.ascontiguousarray(np.asarray(self.basis, dtype=np.float64))
        sigmas = _vec(self.sigmas, "sigmas")
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64)).reshape(-1, 3)
        if mean.size % 3 != 0:
            raise DimensionMismatch("mean length must be divisible by 3")
        if basis.ndim != 2 or basis.shape[0] != mean.size:
            raise DimensionMismatch(f"basis must be ({mean.size}, n), got {basis.shape}")
        if sigmas.size != basis.shape[1]:
            raise DimensionMismatch("sigmas length must equal basis columns")
        if np.any(sigmas <= 0):
            raise DimensionMismatch("sigmas must be positive")
        if faces.size and faces.max() >= mean.size // 3:
            raise DimensionMismatch("face index out of range for vertex count")
        basis.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "faces", faces)

    @property
    def n(self) -> int:
        return self.basis.shape[1]

    @property
    def num_vertices(self) -> int:
        return self.mean.size // 3


@dataclass(frozen=True)
class MultilinearModel:
    """Bilinear model: vertices = mean + sum_ij x_i y_j core[i, j]."""

    mean: np.ndarray  # (3V,)
    core: np.ndarray  # (n, m, 3V)
    neutral_x: np.ndarray  # (n,)
    neutral_y: np.ndarray  # (m,)
    sigmas_x: np.ndarray  # (n,)
    sigmas_y: np.ndarray  # (m,)
    faces: np.ndarray  # (F, 3)

    def __post_init__(self):
        mean = _vec(self.mean, "mean")
        core = np.ascontiguousarray(np.asarray(self.core, dtype=np.float64))
        nx = _vec(self.neutral_x, "neutral_x")
        ny = _vec(self.neutral_y, "neutral_y")
        sx = _vec(self.sigmas_x, "sigmas_x")
        sy = _vec(self.sigmas_y, "sigmas_y")
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64)).reshape(-1, 3)
        if mean.size % 3 != 0:
            raise DimensionMismatch("mean length must be divisible by 3")
        if core.ndim != 3 or core.shape[2] != mean.size:
            raise DimensionMismatch(f"core must be (n, m, {mean.size}), got {core.shape}")
        n, m = core.shape[0], core.shape[1]
        if nx.size != n or sx.size != n or ny.size != m or sy.size != m:
            raise DimensionMismatch("weight vector lengths inconsistent with core")
        if not (np.all(np.isfinite(nx)) and np.all(np.isfinite(ny))):
            raise DimensionMismatch("neutral weights must be finite")
        if np.any(sx <= 0) or np.any(sy <= 0):
            raise DimensionMismatch("sigmas must be positive")
        if faces.size and faces.max() >= mean.size // 3:
            raise DimensionMismatch("face index out of range for vertex count")
        core.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "neutral_x", nx)
        object.__setattr__(self, "neutral_y", ny)
        object.__setattr__(self, "sigmas_x", sx)
        object.__setattr__(self, "sigmas_y", sy)
        object.__setattr__(self, "faces", faces)

    @property
    def n(self) -> int:
        return self.core.shape[0]

    @property
    def m(self) -> int:
        return self.core.shape[1]

    @property
    def num_vertices(self) -> int:
        return self.mean.size // 3


@dataclass(frozen=True)
class Correspondence:
    """Pairing of an EMA coil with one tongue-mesh vertex."""

    coil_id: str
    vertex_index: int


def reconstruct_pca(model: PcaModel, x) -> Mesh:
    """Mesh at weights x: mean + basis @ x."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != model.n:
        raise DimensionMismatch(f"expected {model.n} weights, got {x.size}")
    flat = model.mean + model.basis @ x
    return Mesh(flat.reshape(-1, 3), model.faces)


def multilinear_vertices(model: MultilinearModel, x, y) -> np.ndarray:
    """Flat 3V vertex vector at (x, y) without building a Mesh."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != model.n or y.size != model.m:
        raise DimensionMismatch(
            f"expected weights ({model.n}, {model.m}), got ({x.size}, {y.size})"
        )
    # contract anatomy first: (m, 3V), then pose
    pose_basis = np.tensordot(x, model.core, axes=(0, 0))
    return model.mean + y @ pose_basis


def reconstruct_multilinear(model: MultilinearModel, x, y) -> Mesh:
    """Mesh at anatomy weights x and pose weights y."""
    return Mesh(multilinear_vertices(model, x, y).reshape(-1, 3), model.faces)


def grid_faces(grid: int) -> np.ndarray:
    """Triangulation of a grid x grid vertex lattice: 2*(grid-1)^2 faces."""
    faces = []
    for r in range(grid - 1):
        for c in range(grid - 1):
            i = r * grid + c
            faces.append([i, i + 1, i + grid])
            faces.append([i + 1, i + grid + 1, i + grid])
    return np.array(faces, dtype=np.int64)


def _smooth_field(rng: np.random.Generator, grid: int, orders: int = 3) -> np.ndarray:
    """Random smooth (grid*grid, 3) field from a low-order cosine series."""
    u = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    field = np.zeros((grid, grid, 3))
    for p in range(orders + 1):
        for q in range(orders + 1):
            coef = rng.standard_normal(3) / (1.0 + p + q)
            mode = np.cos(np.pi * p * uu) * np.cos(np.pi * q * vv)
            field += mode[:, :, None] * coef[None, None, :]
    return field.reshape(-1, 3)


def _tongue_mean(grid: int) -> np.ndarray:
    """Dome-shaped height field, roughly tongue sized, in mm."""
    lr = np.linspace(-20.0, 20.0, grid)
    ap = np.linspace(-45.0, 5.0, grid)
    xx, yy = np.meshgrid(lr, ap, indexing="ij")
    zz = 12.0 * np.exp(-((xx / 22.0) ** 2 + ((yy + 20.0) / 28.0) ** 2))
    return np.stack([xx, yy, zz], axis=-1).reshape(-1)


def generate_synthetic_model(seed: int, n: int, m: int, grid: int) -> MultilinearModel:
    """Deterministic smooth bilinear tongue stand-in.

    Each core field is a smooth random deformation; amplitudes decay with
    mode index and sigmas are all 1 so weights are already in
    standard-deviation units.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    if grid < 2:
        raise ValueError("grid must be >= 2")
    rng = np.random.default_rng(seed)
    mean = _tongue_mean(grid)
    core = np.zeros((n, m, grid * grid * 3))
    for i in range(n):
        for j in range(m):
            field = _smooth_field(rng, grid)
            rms = float(np.sqrt(np.mean(np.sum(field**2, axis=1))))
            amp = 2.5 / ((1.0 + i) * (1.0 + j))
            core[i, j] = (field * (amp / max(rms, 1e-12))).reshape(-1)
    return MultilinearModel(
        mean=mean,
        core=core,
        neutral_x=np.zeros(n),
        neutral_y=np.zeros(m),
        sigmas_x=np.ones(n),
        sigmas_y=np.ones(m),
        faces=grid_faces(grid),
    )


def generate_synthetic_palate(seed: int, n: int, grid: int) -> PcaModel:
    """Deterministic smooth PCA palate stand-in (arched height field)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if grid < 2:
        raise ValueError("grid must be >= 2")
    rng = np.random.default_rng(seed)
    lr = np.linspace(-18.0, 18.0, grid)
    ap = np.linspace(-35.0, 5.0, grid)
    xx, yy = np.meshgrid(lr, ap, indexing="ij")
    # palate vault: high along the midline, dropping toward the alveolar ridge
    zz = 18.0 - 10.0 * (xx / 18.0) ** 2 - 4.0 * ((yy + 15.0) / 25.0) ** 2
    mean = np.stack([xx, yy, zz], axis=-1).reshape(-1)
    basis = np.zeros((grid * grid * 3, n))
    for i in range(n):
        field = _smooth_field(rng, grid)
        rms = float(np.sqrt(np.mean(np.sum(field**2, axis=1))))
        amp = 2.0 / (1.0 + i)
        basis[:, i] = (field * (amp / max(rms, 1e-12))).reshape(-1)
    return PcaModel(mean=mean, basis=basis, sigmas=np.ones(n), faces=grid_faces(grid))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise FormatError(msg)


def save_model(model: PcaModel | MultilinearModel, path) -> None:
    """Write the documented JSON model file (floats round-trip exactly)."""
    doc: dict = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "vertices": model.num_vertices,
        "faces": model.faces.tolist(),
        "mean": model.mean.tolist(),
        "units": "mm",
        "axes": MODEL_AXES,
    }
    if isinstance(model, PcaModel):
        doc["kind"] = "pca"
        doc["n"] = model.n
        doc["basis"] = model.basis.T.tolist()
        doc["sigmas"] = model.sigmas.tolist()
    elif isinstance(model, MultilinearModel):
        doc["kind"] = "multilinear"
        doc["n"] = model.n
        doc["m"] = model.m
        doc["core"] = model.core.tolist()
        doc["neutral_x"] = model.neutral_x.tolist()
        doc["neutral_y"] = model.neutral_y.tolist()
        doc["sigmas_x"] = model.sigmas_x.tolist()
        doc["sigmas_y"] = model.sigmas_y.tolist()
    else:
        raise TypeError(f"not a model: {type(model)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> PcaModel | MultilinearModel:
    """Read a model file; raises FormatError on anything off-schema."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    _require(isinstance(doc, dict), f"{path}: top level must be an object")
    _require(doc.get("format") == MODEL_FORMAT, f"{path}: bad magic {doc.get('format')!r}")
    _require(doc.get("version") == MODEL_VERSION, f"{path}: unsupported version {doc.get('version')!r}")
    kind = doc.get("kind")
    _require(kind in ("pca", "multilinear"), f"{path}: unknown kind {kind!r}")
    try:
        nv = int(doc["vertices"])
        faces = np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3)
        mean = np.asarray(doc["mean"], dtype=np.float64)
        _require(mean.size == 3 * nv, f"{path}: mean length {mean.size} != 3*{nv}")
        if kind == "pca":
            n = int(doc["n"])
            basis_rows = np.asarray(doc["basis"], dtype=np.float64)
            _require(
                basis_rows.ndim == 2 and basis_rows.shape == (n, 3 * nv),
                f"{path}: basis must be {n} arrays of {3 * nv} floats",
            )
            sigmas = np.asarray(doc["sigmas"], dtype=np.float64)
            _require(sigmas.size == n, f"{path}: sigmas length != n")
            return PcaModel(mean=mean, basis=basis_rows.T, sigmas=sigmas, faces=faces)
        n = int(doc["n"])
        m = int(doc["m"])
        core = np.asarray(doc["core"], dtype=np.float64)
        _require(
            core.ndim == 3 and core.shape == (n, m, 3 * nv),
            f"{path}: core must be [{n}][{m}] arrays of {3 * nv} floats",
        )
        return MultilinearModel(
            mean=mean,
            core=core,
            neutral_x=np.asarray(doc["neutral_x"], dtype=np.float64),
            neutral_y=np.asarray(doc["neutral_y"], dtype=np.float64),
            sigmas_x=np.asarray(doc["sigmas_x"], dtype=np.float64),
            sigmas_y=np.asarray(doc["sigmas_y"], dtype=np.float64),
            faces=faces,
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, DimensionMismatch) as exc:
        raise FormatError(f"{path}: {exc}") from exc
