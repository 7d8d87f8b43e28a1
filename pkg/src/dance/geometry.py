"""Point-cloud containers, the hexahedral view rig, and candidate generation.

Clouds are normalized so the tightest axis-aligned bounding box has max side
1.0 centered at the origin. The standard rig is six square faces at +-0.75
along each axis (half extent 0.75) with viewpoints at +-1.5; one ray is cast
from the viewpoint through each of the R x R grid cell centers of every face,
and a depth is drawn from a per-ray Gaussian to place the candidate point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import EmptyCloud, UnsupportedRig


class Role(Enum):
    INPUT = "input"
    GROUND_TRUTH = "ground_truth"
    CANDIDATE = "candidate"
    OUTPUT = "output"
    PREDICTED = "predicted"


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    role: Role = Role.INPUT

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Transform:
    """Invertible centering + isotropic scaling applied by normalize_cloud."""

    center: np.ndarray  # (3,)
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def normalize_cloud(cloud: PointCloud):
    """Center a cloud on its bounding-box center and scale the max side to 1.

    Returns (normalized cloud, transform); the transform maps original
    coordinates into the normalized frame and is invertible. A degenerate
    bounding box (all points equal) keeps scale 1.0.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalize an empty point cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = (lo + hi) / 2.0
    side = float((hi - lo).max())
    scale = 1.0 / side if side > 0 else 1.0
    tfm = Transform(center=center, scale=scale)
    return PointCloud(tfm.apply(cloud.points), role=cloud.role), tfm


@dataclass
class FaceFrame:
    viewpoint: np.ndarray    # (3,) camera position
    face_origin: np.ndarray  # (3,) center of the face square
    u_axis: np.ndarray       # (3,) unit vector along grid rows
    v_axis: np.ndarray       # (3,) unit vector along grid columns
    normal: np.ndarray       # (3,) unit vector pointing toward the rig center
    half_extent: float

    def __post_init__(self):
        for name in ("viewpoint", "face_origin", "u_axis", "v_axis", "normal"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))


@dataclass
class ViewRig:
    faces: list  # list of FaceFrame
    grid_resolution: int
    gaussian_spread: float

    @property
    def v_count(self):
        return len(self.faces)

    @property
    def capacity(self):
        return self.v_count * self.grid_resolution ** 2

    def center(self):
        return np.mean([f.face_origin for f in self.faces], axis=0)


# (u, v, normal) triads per face, ordered +x, -x, +y, -y, +z, -z; each triad
# is right-handed with u x v = normal and the normal pointing at the origin.
_FACE_AXES = (
    (0, +1, (0, 0, 1), (0, 1, 0)),
    (0, -1, (0, 1, 0), (0, 0, 1)),
    (1, +1, (1, 0, 0), (0, 0, 1)),
    (1, -1, (0, 0, 1), (1, 0, 0)),
    (2, +1, (0, 1, 0), (1, 0, 0)),
    (2, -1, (1, 0, 0), (0, 1, 0)),
)

FACE_OFFSET = 0.75
VIEWPOINT_OFFSET = 1.5


def build_view_rig(v_count=6, r=21, spread=0.25, faces=None):
    """Build the sampling rig: custom faces if given, else the standard cube.

    The standard rig requires v_count == 6; its faces sit at +-0.75 along
    each axis with half extent 0.75 and viewpoints at +-1.5.
    """
    if r < 1:
        raise ValueError("grid resolution must be >= 1")
    if not 0 < spread <= 1:
        raise ValueError("gaussian spread must lie in (0, 1]")
    if faces is not None:
        return ViewRig(faces=list(faces), grid_resolution=r, gaussian_spread=spread)
    if v_count != 6:
        raise UnsupportedRig(f"standard rig supports exactly 6 faces, got {v_count}")
    built = []
    for axis, sign, u, v in _FACE_AXES:
        e = np.zeros(3)
        e[axis] = sign
        built.append(FaceFrame(
            viewpoint=e * VIEWPOINT_OFFSET,
            face_origin=e * FACE_OFFSET,
            u_axis=np.array(u, dtype=np.float64),
            v_axis=np.array(v, dtype=np.float64),
            normal=-e,
            half_extent=FACE_OFFSET,
        ))
    return ViewRig(faces=built, grid_resolution=r, gaussian_spread=spread)


@dataclass
class CandidateSet:
    points: np.ndarray        # (M, 3) sampled positions
    view_index: np.ndarray    # (M,) face index of each candidate
    grid_coords: np.ndarray   # (M, 2) (i, j) cell indices on the face grid
    ray_origin: np.ndarray    # (M, 3) viewpoint of the generating ray
    ray_dir: np.ndarray       # (M, 3) unit direction of the ray
    local_frames: np.ndarray  # (M, 3, 3) columns are the x/y/z frame axes

    def __len__(self):
        return self.points.shape[0]


def _ray_bbox_entry(origins, dirs, lo, hi):
    """First nonnegative slab-intersection parameter per ray, NaN on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    near = np.fmin(t1, t2).max(axis=1)
    far = np.fmax(t1, t2).min(axis=1)
    entry = np.maximum(near, 0.0)
    hit = (far >= entry) & np.isfinite(far) & np.isfinite(near)
    return np.where(hit, entry, np.nan)


def generate_candidates(rig: ViewRig, input_cloud: PointCloud, seed: int) -> CandidateSet:
    """Sample one candidate per face grid cell of the rig.

    Each ray runs from the face's viewpoint through a grid cell center. Depth
    along the ray is drawn once from a Gaussian: its mean is the midpoint of
    the face-plane crossing and the ray's first hit on the input cloud's
    bounding box (rays that miss the box anchor on the plane through the rig
    center instead); its std-dev is spread times the gap between those two
    anchors. Depths are clamped between the face plane and the mirrored far
    plane so candidates stay inside the rig's depth range. Each face draws
    from an RNG stream derived from (seed, face index), so generation is
    deterministic and faces are independent.
    """
    if len(input_cloud) == 0:
        raise EmptyCloud("candidate generation needs a non-empty input cloud")
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    r = rig.grid_resolution
    lo = input_cloud.points.min(axis=0)
    hi = input_cloud.points.max(axis=0)
    rig_center = rig.center()

    # cell-center offsets along the face axes, index i slow / j fast
    steps = (np.arange(r) + 0.5) / r * 2.0 - 1.0
    ii, jj = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")

    all_parts = []
    for v_idx, face in enumerate(rig.faces):
        off_u = steps[ii.ravel()] * face.half_extent
        off_v = steps[jj.ravel()] * face.half_extent
        grid_pts = face.face_origin + off_u[:, None] * face.u_axis + off_v[:, None] * face.v_axis

        rel = grid_pts - face.viewpoint
        t_face = np.linalg.norm(rel, axis=1)
        dirs = rel / t_face[:, None]

        origins = np.broadcast_to(face.viewpoint, dirs.shape)
        t_hit = _ray_bbox_entry(origins, dirs, lo, hi)
        dn = np.maximum(dirs @ face.normal, 1e-12)
        t_center = ((rig_center - face.viewpoint) @ face.normal) / dn
        t_anchor = np.where(np.isnan(t_hit), t_center, t_hit)

        far_point = 2.0 * rig_center - face.face_origin
        t_far = ((far_point - face.viewpoint) @ face.normal) / dn

        mean_t = 0.5 * (t_face + t_anchor)
        std_t = rig.gaussian_spread * np.abs(t_anchor - t_face)
        rng = np.random.default_rng(np.random.SeedSequence((seed, v_idx)))
        t = mean_t + std_t * rng.standard_normal(r * r)
        t = np.clip(t, t_face, t_far)
        pts = face.viewpoint + t[:, None] * dirs

        # local frame per ray: z along the ray, x from the face's u axis with
        # the z component removed, y completing a right-handed triad
        x_axis = face.u_axis - (dirs @ face.u_axis)[:, None] * dirs
        x_axis /= np.linalg.norm(x_axis, axis=1)[:, None]
        y_axis = np.cross(dirs, x_axis)
        frames = np.stack([x_axis, y_axis, dirs], axis=-1)

        all_parts.append((
            pts,
            np.full(r * r, v_idx, dtype=np.int64),
            np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64),
            np.repeat(face.viewpoint[None, :], r * r, axis=0),
            dirs,
            frames,
        ))

    return CandidateSet(
        points=np.concatenate([p[0] for p in all_parts]),
        view_index=np.concatenate([p[1] for p in all_parts]),
        grid_coords=np.concatenate([p[2] for p in all_parts]),
        ray_origin=np.concatenate([p[3] for p in all_parts]),
        ray_dir=np.concatenate([p[4] for p in all_parts]),
        local_frames=np.concatenate([p[5] for p in all_parts]),
    )


@dataclass
class Prediction:
    """Per-candidate refinement: offsets in the local ray frame, opacities in [0,1].

    Both fields accept plain arrays or autodiff tensors; consumers convert
    with np.asarray.
    """

    offsets: object   # (M, 3)
    opacities: object  # (M,)


def offsets_to_world(candidates: CandidateSet, offsets) -> np.ndarray:
    """Map local-frame offsets to world points: p_m plus the rotated offset."""
    offs = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    return candidates.points + np.einsum("mij,mj->mi", candidates.local_frames, offs)


def local_to_world(candidates: CandidateSet, m: int, offset) -> np.ndarray:
    off = np.asarray(offset, dtype=np.float64).reshape(3)
    return candidates.points[m] + candidates.local_frames[m] @ off


def assemble_output(candidates: CandidateSet, pred: Prediction, threshold=0.5) -> PointCloud:
    """Keep the refined points whose opacity passes the threshold (boundary kept)."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    opac = np.asarray(pred.opacities, dtype=np.float64).reshape(-1)
    refined = offsets_to_world(candidates, pred.offsets)
    keep = opac >= threshold
    return PointCloud(refined[keep], role=Role.OUTPUT)


def union_prediction(input_cloud: PointCloud, missing: PointCloud) -> PointCloud:
    """Concatenate the observed input with the predicted missing points."""
    return PointCloud(
        np.concatenate([input_cloud.points, missing.points], axis=0),
        role=Role.PREDICTED,
    )
