"""Meshes, rigid transforms, alignment and surface queries.

Coordinate convention used throughout the package: origin at the incisor
point, +y anterior, +z toward the palate (superior), +x toward the
subject's left. All lengths are millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollinearPoints, EmptyMesh, LengthMismatch

_EPS = 1e-12


def _as_points(p, name: str = "points") -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must be (N, 3), got {a.shape}")
    return a


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh: vertices (V, 3) in mm, faces (F, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and (
            np.any(f[:, 0] == f[:, 1])
            or np.any(f[:, 1] == f[:, 2])
            or np.any(f[:, 0] == f[:, 2])
        ):
            raise ValueError("degenerate face with repeated vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def flat(self) -> np.ndarray:
        """Vertices as one 3V vector (x0, y0, z0, x1, ...)."""
        return self.vertices.reshape(-1)


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps round-trips and comparisons stable
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
    return _quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R p + t, rotation stored as unit quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = _quat_normalize(q)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, r: np.ndarray, t) -> "RigidTransform":
        return cls(matrix_to_quat(r), np.asarray(t, dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, p):
        """Transform one point (3,) or many (N, 3)."""
        a = np.asarray(p, dtype=np.float64)
        single = a.ndim == 1
        pts = _as_points(a) @ self.matrix.T + self.translation
        return pts[0] if single else pts

    def rotate(self, v):
        """Rotate a vector (or rows of vectors) without translating."""
        a = np.asarray(v, dtype=np.float64)
        single = a.ndim == 1
        out = _as_points(a) @ self.matrix.T
        return out[0] if single else out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: the transform applying `other` first, then `self`."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.rotate(other.translation) + self.translation
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        qc = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        rinv = quat_to_matrix(qc)
        return RigidTransform(qc, -(rinv @ self.translation))


def apply_transform(t: RigidTransform, p):
    """Rotate then translate `p`; preserves pairwise distances."""
    return t.apply(p)


def rigid_align(source, target) -> RigidTransform:
    """Least-squares rigid motion T minimizing sum |T(source_i) - target_i|^2.

    Closed-form solution via SVD of the cross-covariance, with the
    determinant sign corrected so the rotation is proper (no reflection).

    Raises LengthMismatch for unequal or too-short lists and CollinearPoints
    when the centered source has rank < 2.
    """
    src = _as_points(source, "source")
    tgt = _as_points(target, "target")
    if len(src) != len(tgt):
        raise LengthMismatch(f"source has {len(src)} points, target {len(tgt)}")
    if len(src) < 3:
        raise LengthMismatch("need at least 3 point pairs")

    cs = src.mean(axis=0)
    ct = tgt.mean(axis=0)
    a = src - cs
    b = tgt - ct

    sv = np.linalg.svd(a, compute_uv=False)
    scale = max(sv[0], _EPS)
    if sv[1] <= 1e-8 * scale:
        raise CollinearPoints("source points are collinear (rank < 2)")

    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = ct - r @ cs
    return RigidTransform.from_matrix(r, t)


def bite_plane_frame(left_molar, right_molar, front, origin) -> RigidTransform:
    """Canonical-frame transform from three bite-plate points and an origin.

    The result T maps `origin` to (0,0,0), the bite points onto a common
    z level, +y toward `front` (anterior) within the plane, and +x toward
    the left molar; +z is the plane normal on the palate side of the plane
    (the side `origin` lies on when it is off-plane).
    """
    lm = np.asarray(left_molar, dtype=np.float64).reshape(3)
    rm = np.asarray(right_molar, dtype=np.float64).reshape(3)
    fr = np.asarray(front, dtype=np.float64).reshape(3)
    o = np.asarray(origin, dtype=np.float64).reshape(3)

    mid = 0.5 * (lm + rm)
    left_dir = lm - rm
    ant = fr - mid
    normal = np.cross(left_dir, ant)
    scale = max(np.linalg.norm(left_dir), np.linalg.norm(ant), _EPS)
    if np.linalg.norm(normal) <= 1e-9 * scale * scale:
        raise CollinearPoints("bite points do not span a plane")
    z = normal / np.linalg.norm(normal)

    # flip toward the palate: origin side wins when it is clearly off-plane
    h = float(np.dot(o - mid, z))
    if abs(h) > 1e-9 * scale and h < 0:
        z = -z

    y = ant - np.dot(ant, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)

    r = np.vstack([x, y, z])  # rows: new axes expressed in old coordinates
    return RigidTransform.from_matrix(r, -(r @ o))


@dataclass(frozen=True)
class SurfaceHit:
    """Nearest point on a mesh: location, owning face, distance, barycentric."""

    point: np.ndarray
    face_index: int
    distance: float
    barycentric: np.ndarray


def closest_point_on_mesh(q, mesh: Mesh) -> SurfaceHit:
    """Globally nearest point to `q` on any triangle of `mesh`.

    All faces are tested (vectorized Voronoi-region classification per
    triangle); ties resolve to the lowest face index.
    """
    if mesh.num_faces == 0:
        raise EmptyMesh("mesh has no faces")
    q = np.asarray(q, dtype=np.float64).reshape(3)

    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    a, b, c = tri[:, 0, :], tri[:, 1, :], tri[:, 2, :]
    ab = b - a
    ac = c - a

    ap = q - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = q - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = q - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    nf = len(tri)
    u = np.empty(nf)
    v = np.empty(nf)

    # regions applied lowest-priority first so later masks overwrite, which
    # reproduces the usual sequential classification exactly
    denom_in = va + vb + vc
    safe_in = np.where(denom_in != 0.0, denom_in, 1.0)
    v_in = vb / safe_in
    w_in = vc / safe_in
    u[:] = 1.0 - v_in - w_in
    v[:] = v_in

    # edge BC
    bc_t = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) != 0.0, (d4 - d3) + (d5 - d6), 1.0)
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    u[m] = 0.0
    v[m] = 1.0 - bc_t[m]
    # edge AC
    ac_t = d2 / np.where(d2 - d6 != 0.0, d2 - d6, 1.0)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    u[m] = 1.0 - ac_t[m]
    v[m] = 0.0
    # vertex C
    m = (d6 >= 0) & (d5 <= d6)
    u[m], v[m] = 0.0, 0.0
    # edge AB
    ab_t = d1 / np.where(d1 - d3 != 0.0, d1 - d3, 1.0)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    u[m] = 1.0 - ab_t[m]
    v[m] = ab_t[m]
    # vertex B
    m = (d3 >= 0) & (d4 <= d3)
    u[m], v[m] = 0.0, 1.0
    # vertex A
    m = (d1 <= 0) & (d2 <= 0)
    u[m], v[m] = 1.0, 0.0

    w = 1.0 - u - v
    pts = a * u[:, None] + b * v[:, None] + c * w[:, None]
    d2q = np.einsum("ij,ij->i", pts - q, pts - q)
    # lowest face index among (near-)ties, e.g. a hit on a shared edge
    d2min = float(d2q.min())
    i = int(np.argmax(d2q <= d2min + 1e-24 + 1e-12 * d2min))
    bary = np.array([u[i], v[i], w[i]])
    # clamp tiny negative round-off so the weights stay a convex combination
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum()
    return SurfaceHit(point=pts[i], face_index=i, distance=float(np.sqrt(d2q[i])), barycentric=bary)


def read_obj(path) -> Mesh:
    """Read the `v`/`f` subset of Wavefront OBJ; polygons are fan-triangulated."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: short vertex line")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) < 3:
                    raise ValueError(f"{path}:{lineno}: face with < 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: Mesh) -> None:
    """Write vertices and triangle faces with 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for i, j, k in mesh.faces:
            fh.write(f"f {i + 1} {j + 1} {k + 1}\n")
