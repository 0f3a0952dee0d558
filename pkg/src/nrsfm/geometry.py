"""Cameras, projection, normalization, alignment, and evaluation metrics."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraWeak:
    """Weak-perspective camera: column-orthonormal 3x2 rotation part,
    positive scale, 2D image translation."""

    rotation: np.ndarray
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).ravel()
        if self.rotation.shape != (3, 2):
            raise ValueError(f"camera rotation part must be 3x2, got {self.rotation.shape}")
        if self.translation.shape != (2,):
            raise ValueError("camera translation must be a 2-vector")
        if self.scale <= 0:
            raise ValueError("camera scale must be positive")


def _check_orthonormal(M, tol=1e-6):
    err = np.max(np.abs(M.T @ M - np.eye(2)))
    if err > tol:
        raise ValueError(f"camera rotation part is not column-orthonormal (error {err:.3g})")


def project(S, cam, mode="orthogonal"):
    """Project a P-by-3 shape with a weak-perspective camera.

    orthogonal: W = S M (requires scale 1, zero translation).
    weak_perspective: W = scale * S M + 1 t^T.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[1] != 3:
        raise ValueError(f"project: shape must be (P, 3), got {S.shape}")
    _check_orthonormal(cam.rotation)
    if mode == "orthogonal":
        if cam.scale != 1.0 or np.any(cam.translation != 0):
            raise ValueError("project: orthogonal mode requires scale 1 and zero translation")
        return S @ cam.rotation
    if mode == "weak_perspective":
        return cam.scale * (S @ cam.rotation) + cam.translation[None, :]
    raise ValueError(f"project: unknown mode {mode!r}")


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_rotation(seed):
    """Uniformly random 3x3 rotation matrix via unit-quaternion sampling."""
    rng = _rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_camera(seed, mode="orthogonal"):
    """Sample a random camera: first two columns of a uniform rotation;
    weak-perspective mode additionally draws scale in [0.5, 1.5] and
    translation in [-0.5, 0.5]^2."""
    rng = _rng(seed)
    M = random_rotation(rng)[:, :2]
    if mode == "orthogonal":
        return CameraWeak(M)
    if mode == "weak_perspective":
        scale = rng.uniform(0.5, 1.5)
        t = rng.uniform(-0.5, 0.5, size=2)
        return CameraWeak(M, scale=scale, translation=t)
    raise ValueError(f"random_camera: unknown mode {mode!r}")


def normalize_bbox(W, mask=None):
    """Shift visible points to zero centroid and divide by the larger
    bounding-box side, so max(width, height) = 1.  Invisible entries are
    zeroed.  Returns (normalized W, (centroid, scale))."""
    W = np.asarray(W, dtype=float)
    if mask is None:
        mask = np.ones(W.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool).ravel()
    vis = W[mask]
    if vis.shape[0] < 2:
        raise ValueError("normalize_bbox: need at least 2 visible points")
    extent = vis.max(axis=0) - vis.min(axis=0)
    scale = float(extent.max())
    if scale <= 0:
        raise ValueError("normalize_bbox: degenerate frame, visible points coincide")
    centroid = vis.mean(axis=0)
    Wn = np.where(mask[:, None], (W - centroid) / scale, 0.0)
    return Wn, (centroid, scale)


def denormalize_bbox(W, record, mask=None):
    """Invert normalize_bbox using its (centroid, scale) record."""
    centroid, scale = record
    W = np.asarray(W, dtype=float) * scale + np.asarray(centroid, dtype=float)
    if mask is not None:
        W = np.where(np.asarray(mask, dtype=bool)[:, None], W, 0.0)
    return W


def translation_residual(W, mask):
    """Centering residual caused by missing points: (1/P) * sum over
    invisible points of their image coordinates."""
    W = np.asarray(W, dtype=float)
    mask = np.asarray(mask, dtype=bool).ravel()
    P = W.shape[0]
    return W[~mask].sum(axis=0) / P


def orthonormalize_camera(Mraw):
    """Nearest column-orthonormal 3x2 matrix (polar factor U V^T of the thin
    SVD).  Returns (Mortho, singular values); rejects rank-deficient input."""
    Mraw = np.asarray(Mraw, dtype=float)
    if Mraw.shape != (3, 2):
        raise ValueError(f"orthonormalize_camera: expected 3x2, got {Mraw.shape}")
    U, s, Vt = np.linalg.svd(Mraw, full_matrices=False)
    if s[-1] <= 1e-10:
        raise ValueError(f"orthonormalize_camera: rank-deficient input (sigma2 = {s[-1]:.3g})")
    return U @ Vt, s


def procrustes_rotation(Sest, Sgt):
    """Orthogonal matrix R (reflections permitted) minimizing ||Sest R - Sgt||_F."""
    A = Sest.T @ Sgt
    U, _, Vt = np.linalg.svd(A)
    return U @ Vt


def align_shapes(Sest, Sgt, allow_scale=False):
    """Align an estimated shape to ground truth by orthogonal Procrustes,
    optionally with an optimal global scale."""
    Sest = np.asarray(Sest, dtype=float)
    Sgt = np.asarray(Sgt, dtype=float)
    if Sest.shape != Sgt.shape:
        raise ValueError("align_shapes: shapes must have matching size")
    R = procrustes_rotation(Sest, Sgt)
    aligned = Sest @ R
    if allow_scale:
        denom = np.sum(aligned * aligned)
        if denom > 0:
            aligned = aligned * (np.sum(aligned * Sgt) / denom)
    return aligned


def normalized_3d_error(estimates, truths, allow_scale=False, align=True):
    """Mean over frames of ||align(S_est) - S_gt||_F / ||S_gt||_F."""
    if len(estimates) != len(truths):
        raise ValueError("normalized_3d_error: frame counts differ")
    errs = []
    for Sest, Sgt in zip(estimates, truths):
        Sgt = np.asarray(Sgt, dtype=float)
        denom = np.linalg.norm(Sgt)
        if denom == 0:
            raise ValueError("normalized_3d_error: zero-norm ground-truth frame")
        Sa = align_shapes(Sest, Sgt, allow_scale=allow_scale) if align else np.asarray(Sest, dtype=float)
        errs.append(np.linalg.norm(Sa - Sgt) / denom)
    return float(np.mean(errs))


def mutual_coherence(D):
    """Max over atom pairs of |d_i^T d_j| / (||d_i|| ||d_j||)."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[1] < 2:
        raise ValueError("mutual_coherence: need a matrix with at least 2 atoms")
    norms = np.linalg.norm(D, axis=0)
    if np.any(norms == 0):
        raise ValueError("mutual_coherence: zero-norm atom")
    G = np.abs((D / norms).T @ (D / norms))
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def noise_perturb(W, ratio, seed):
    """Add Gaussian noise rescaled so ||noise||_F / ||W||_F equals ratio
    exactly (per frame)."""
    W = np.asarray(W, dtype=float)
    if ratio < 0:
        raise ValueError("noise_perturb: ratio must be non-negative")
    if ratio == 0:
        return W.copy()
    rng = _rng(seed)
    noise = rng.standard_normal(W.shape)
    noise *= ratio * np.linalg.norm(W) / np.linalg.norm(noise)
    return W + noise
