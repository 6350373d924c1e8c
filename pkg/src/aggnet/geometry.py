"""Plane-to-image homographies and rectification to a constant GSD.

Conventions used throughout:

* Object points live on the planar aggregate surface, in millimeters.
* Image points are pixel coordinates (u = column, v = row).
* A `Homography` maps homogeneous object points to image points.
* A rectified image samples the object plane on a regular grid: output
  pixel (row i, col j) sits at object point (j / gsd, i / gsd) mm, so a
  gsd of 1 px/mm makes pixel and mm coordinates coincide.

Estimation uses the normalized direct linear transform: both point sets
are translated to their centroid and scaled to mean distance sqrt(2)
before the 2Nx9 system is solved by SVD, which keeps the system well
conditioned at px/mm coordinate magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError


@dataclass(frozen=True)
class Correspondence:
    """One marker: object plane (X, Y) in mm versus image (u, v) in px."""

    X: float
    Y: float
    u: float
    v: float


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so H[2, 2] == 1.

    `rmse_px` is the reprojection root-mean-square error over the points
    used for estimation; `condition` is the matrix condition number.
    """

    H: np.ndarray
    rmse_px: float = 0.0
    condition: float = 1.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        if H.shape != (3, 3):
            raise ContractError(f"homography must be 3x3, got {H.shape}")
        if not np.all(np.isfinite(H)):
            raise ContractError("homography contains non-finite entries")
        if abs(H[2, 2]) > 1e-300:
            H = H / H[2, 2]
        object.__setattr__(self, "H", H)

    def apply(self, points_mm):
        """Project (N, 2) object points to (N, 2) image points."""
        return _project(self.H, points_mm)

    def inverse(self):
        try:
            inv = np.linalg.inv(self.H)
        except np.linalg.LinAlgError as exc:
            raise ContractError(f"homography is not invertible: {exc}") from exc
        return Homography(H=inv, condition=float(np.linalg.cond(inv)))


@dataclass(frozen=True)
class RectifiedImage:
    """Constant-GSD view of the object plane.

    `pixels` is (h, w, 3) in [0, 1]; `valid` marks pixels whose source
    sample fell inside the input image; `extent_mm` is (x, y) size and
    `gsd` the scale in px/mm.
    """

    pixels: np.ndarray
    gsd: float
    extent_mm: tuple
    valid: np.ndarray


def _project(H, points):
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise ContractError("point projects to infinity under this homography")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


def _normalizer(points):
    """Similarity transform taking points to centroid 0, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise ContractError("degenerate configuration: all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def estimate_homography(correspondences):
    """Fit object->image homography from at least 4 marker correspondences.

    Least-squares in the algebraic sense: the singular vector of the
    normalized design matrix with smallest singular value. Degenerate
    layouts (collinear or coincident points) are rejected with the
    singular-value ratio in the message.
    """
    pts = [(c.X, c.Y, c.u, c.v) for c in correspondences]
    if len(pts) < 4:
        raise ContractError(f"need at least 4 correspondences, got {len(pts)}")
    arr = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("correspondences contain non-finite coordinates")
    obj, img = arr[:, :2], arr[:, 2:]
    T_obj, T_img = _normalizer(obj), _normalizer(img)
    no = _project(T_obj, obj)
    ni = _project(T_img, img)
    n = len(arr)
    A = np.zeros((2 * n, 9))
    X, Y = no[:, 0], no[:, 1]
    u, v = ni[:, 0], ni[:, 1]
    A[0::2, 3:6] = -np.column_stack([X, Y, np.ones(n)])
    A[0::2, 6:9] = v[:, None] * np.column_stack([X, Y, np.ones(n)])
    A[1::2, 0:3] = np.column_stack([X, Y, np.ones(n)])
    A[1::2, 6:9] = -u[:, None] * np.column_stack([X, Y, np.ones(n)])
    _, sv, Vt = np.linalg.svd(A)
    if sv[0] <= 0 or sv[-2] / sv[0] < 1e-10:
        raise ContractError(
            "degenerate correspondence configuration (singular-value ratio "
            f"{0.0 if sv[0] <= 0 else sv[-2] / sv[0]:.3e}); are the points collinear?")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T_img) @ Hn @ T_obj
    if abs(H[2, 2]) < 1e-300:
        raise ContractError("estimated homography has a vanishing scale entry")
    H = H / H[2, 2]
    reproj = _project(H, obj)
    rmse = float(np.sqrt(((reproj - img) ** 2).sum(axis=1).mean()))
    return Homography(H=H, rmse_px=rmse, condition=float(np.linalg.cond(H)))


def warp_rectify(image, homography, target_gsd, target_extent_mm):
    """Resample the object plane into a nadir view at `target_gsd` px/mm.

    Inverse mapping with bilinear interpolation: each output pixel center
    is sent through H into the source image. Samples outside the source
    are 0 and cleared in the validity mask. `target_extent_mm` is the
    (x, y) size of the object region starting at the object origin.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected (h, w, 3) image, got shape {img.shape}")
    if target_gsd <= 0:
        raise ContractError(f"target gsd must be positive, got {target_gsd}")
    ex, ey = float(target_extent_mm[0]), float(target_extent_mm[1])
    if ex <= 0 or ey <= 0:
        raise ContractError(f"target extent must be positive, got {target_extent_mm}")
    H = homography.H if isinstance(homography, Homography) else np.asarray(homography)
    Homography(H=H)  # validates shape/finiteness
    if abs(np.linalg.det(H)) < 1e-12:
        raise ContractError("homography is not invertible")
    w_out = max(1, round(ex * target_gsd))
    h_out = max(1, round(ey * target_gsd))
    jj, ii = np.meshgrid(np.arange(w_out), np.arange(h_out))
    obj = np.column_stack([jj.ravel() / target_gsd, ii.ravel() / target_gsd])
    uv = _project(H, obj)
    pixels, valid = _bilinear_sample(img, uv[:, 0], uv[:, 1])
    return RectifiedImage(
        pixels=pixels.reshape(h_out, w_out, 3),
        gsd=float(target_gsd),
        extent_mm=(ex, ey),
        valid=valid.reshape(h_out, w_out),
    )


def _bilinear_sample(img, u, v):
    h, w = img.shape[:2]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(int), 0, w - 2) if w > 1 else np.zeros(len(u), int)
    v0 = np.clip(np.floor(vc).astype(int), 0, h - 2) if h > 1 else np.zeros(len(v), int)
    fu = (uc - u0) if w > 1 else np.zeros_like(uc)
    fv = (vc - v0) if h > 1 else np.zeros_like(vc)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    out = (img[v0, u0] * ((1 - fv) * (1 - fu))[:, None]
           + img[v0, u1] * ((1 - fv) * fu)[:, None]
           + img[v1, u0] * (fv * (1 - fu))[:, None]
           + img[v1, u1] * (fv * fu)[:, None])
    out[~valid] = 0.0
    return out, valid


def _axis_weights(src, dst):
    """(dst, src) resampling matrix for one axis; rows sum to 1.

    Downsampling integrates source cells overlapping each output cell
    (area averaging); upsampling interpolates between the two nearest
    source centers. src == dst gives the identity.
    """
    if dst == src:
        return np.eye(src)
    W = np.zeros((dst, src))
    if dst < src:
        ratio = src / dst
        for j in range(dst):
            lo, hi = j * ratio, (j + 1) * ratio
            t0, t1 = int(np.floor(lo)), min(src, int(np.ceil(hi)))
            for t in range(t0, t1):
                W[j, t] = min(hi, t + 1) - max(lo, t)
    else:
        ratio = src / dst
        centers = (np.arange(dst) + 0.5) * ratio - 0.5
        for j, c in enumerate(centers):
            if c <= 0:
                W[j, 0] = 1.0
            elif c >= src - 1:
                W[j, src - 1] = 1.0
            else:
                t = int(np.floor(c))
                W[j, t] = 1.0 - (c - t)
                W[j, t + 1] = c - t
    return W / W.sum(axis=1, keepdims=True)


def resample_gsd(rectified: RectifiedImage, dst_gsd):
    """Change a rectified image's scale; extent in mm is preserved.

    New spatial size is round(extent * dst_gsd) per axis. Downsampling
    area-averages (anti-aliasing protects the finest fractions),
    upsampling is bilinear.
    """
    if dst_gsd <= 0:
        raise ContractError(f"dst_gsd must be positive, got {dst_gsd}")
    ex, ey = rectified.extent_mm
    h, w = rectified.pixels.shape[:2]
    w_new = max(1, round(ex * dst_gsd))
    h_new = max(1, round(ey * dst_gsd))
    Wr = _axis_weights(h, h_new)
    Wc = _axis_weights(w, w_new)
    pixels = np.einsum("rh,hwc,sw->rsc", Wr, rectified.pixels, Wc, optimize=True)
    valid = (Wr @ rectified.valid.astype(np.float64) @ Wc.T) > 0.999
    return RectifiedImage(pixels=np.clip(pixels, 0.0, 1.0), gsd=float(dst_gsd),
                          extent_mm=(ex, ey), valid=valid)


def load_correspondences(path):
    """Read `X_mm Y_mm u_px v_px` quadruples; `#` starts a comment."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 fields 'X_mm Y_mm u_px v_px', "
                    f"got {len(fields)}")
            try:
                X, Y, u, v = (float(f) for f in fields)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if not all(np.isfinite([X, Y, u, v])):
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            out.append(Correspondence(X=X, Y=Y, u=u, v=v))
    if not out:
        raise DataError(f"{path}: no correspondences found")
    return out
