"""Scaleless camera motion from bearing-ray matches.

Matches are unit rays, so perspective and spherical cameras share one code
path. Internally the epipolar geometry is written for the coordinate map
camera-1 -> camera-2, ``x2 ~ R21 x1 + t21`` with ``ray2^T E ray1 = 0`` and
``E = [t21]x R21``. Public results are camera motions in the hand-eye
convention (pose of camera 2 in the camera-1 frame).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CheiralityAmbiguous, NoConsensus, TooFewMatches
from .geometry import ScaledMotion, exp_so3
from .lsq import Refinement, levenberg_marquardt

log = logging.getLogger(__name__)

MIN_MATCHES = 8
_BLOCK = 256


@dataclass(frozen=True, eq=False)
class FeatureMatches:
    """Bearing-ray matches between two views, stored as parallel arrays."""

    rays1: np.ndarray
    rays2: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        r1 = np.asarray(self.rays1, dtype=float).reshape(-1, 3)
        r2 = np.asarray(self.rays2, dtype=float).reshape(-1, 3)
        if r1.shape != r2.shape:
            raise ValueError("rays1 and rays2 must have the same length")
        r1 = r1 / np.linalg.norm(r1, axis=1, keepdims=True)
        r2 = r2 / np.linalg.norm(r2, axis=1, keepdims=True)
        w = np.ones(len(r1)) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        for name, arr in (("rays1", r1), ("rays2", r2), ("weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.rays1)

    @classmethod
    def from_pixels(cls, camera, pixels1, pixels2, weights=None):
        return cls(camera.unproject_many(pixels1), camera.unproject_many(pixels2), weights)

    def subset(self, index):
        return FeatureMatches(self.rays1[index], self.rays2[index], self.weights[index])


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 1000
    inlier_threshold: float = float(np.radians(0.2))
    seed: int = 0
    min_inliers: int = 8
    kernel: str = "five_point"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")


def project_to_essential(E):
    """Closest matrix with singular values (1, 1, 0); works on stacks."""
    U, s, Vt = np.linalg.svd(E)
    return U @ (np.array([1.0, 1.0, 0.0])[..., :, None] * Vt)


def epipolar_angles(E, rays1, rays2):
    """Angle between each ray2 and the epipolar plane of its ray1.

    ``E`` may be a single matrix or a (K, 3, 3) stack; returns (N,) or (K, N).
    """
    n = np.einsum("...ij,nj->...ni", E, rays1)
    nn = np.linalg.norm(n, axis=-1)
    dot = np.einsum("...ni,ni->...n", n, rays2)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.abs(dot) / nn
    s = np.where(nn > 0, s, 1.0)
    return np.arcsin(np.clip(s, 0.0, 1.0))


def _design(rays1, rays2):
    # row . vec(E) = ray2^T E ray1, vec row-major
    return (rays2[..., :, None] * rays1[..., None, :]).reshape(*rays1.shape[:-1], 9)


def eight_point(rays1, rays2):
    """Linear essential matrix from >= 8 matches; batched over leading axes."""
    A = _design(rays1, rays2)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[..., -1, :].reshape(*A.shape[:-2], 3, 3)
    return project_to_essential(E)[..., None, :, :]


# monomials of degree <= 3 in (x, y, z); the first ten are eliminated, the
# last ten span the quotient ring used for the action matrix
_MONOMIALS = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1), (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]  # fmt: skip
_MONO_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}


def _triple_index():
    idx = np.zeros((4, 4, 4), dtype=int)
    for a in range(4):
        for b in range(4):
            for c in range(4):
                e = [0, 0, 0]
                for k in (a, b, c):
                    if k < 3:
                        e[k] += 1
                idx[a, b, c] = _MONO_INDEX[tuple(e)]
    return idx.ravel()


_TRIPLE = _triple_index()
_MIX = np.linalg.qr(np.random.default_rng(5).normal(size=(4, 4)))[0]
_LEVI = np.zeros((3, 3, 3))
_LEVI[0, 1, 2] = _LEVI[1, 2, 0] = _LEVI[2, 0, 1] = 1
_LEVI[0, 2, 1] = _LEVI[2, 1, 0] = _LEVI[1, 0, 2] = -1


def five_point(rays1, rays2):
    """Minimal essential-matrix solver on bearing rays.

    Batched over the leading axis: ``rays*`` are (K, 5, 3). Returns a
    (K, 10, 3, 3) stack of candidates plus a (K, 10) validity mask (only real
    roots are valid). The ten cubic constraints (``det E = 0`` and the trace
    identity) are reduced by Gauss-Jordan elimination and the roots read off
    the eigenvectors of the multiplication-by-x action matrix.
    """
    K = rays1.shape[0]
    A = _design(rays1, rays2)
    _, _, Vt = np.linalg.svd(A, full_matrices=True)
    # a fixed mixing of the null-space basis keeps the solution away from w = 0
    basis = np.einsum("ab,qbj->qaj", _MIX, Vt[:, 5:, :]).reshape(K, 4, 3, 3)  # E = x*B0 + y*B1 + z*B2 + B3

    det = np.einsum("ijk,qai,qbj,qck->qabc", _LEVI, basis[:, :, 0, :], basis[:, :, 1, :], basis[:, :, 2, :])
    EEt = np.einsum("qaik,qbjk->qabij", basis, basis)
    tr = np.einsum("qabii->qab", EEt)
    T = 2 * np.einsum("qabij,qcjk->qabcik", EEt, basis) - np.einsum("qab,qcik->qabcik", tr, basis)
    terms = np.concatenate([det.reshape(K, 64, 1), T.reshape(K, 64, 9)], axis=2)  # (K, 64, 10)
    C = np.zeros((K, 20, 10))
    np.add.at(C, (slice(None), _TRIPLE), terms)
    C = C.transpose(0, 2, 1)  # (K, 10 equations, 20 monomials)

    valid = np.ones((K, 10), dtype=bool)
    out = np.zeros((K, 10, 3, 3))
    lead = C[:, :, :10]
    ok = np.abs(np.linalg.det(lead)) > 1e-300
    ok &= np.linalg.cond(lead) < 1e14
    if not ok.any():
        return out, ~valid
    B = np.linalg.solve(lead[ok], C[ok][:, :, 10:])
    n = B.shape[0]
    M = np.zeros((n, 10, 10))
    M[:, :6] = -B[:, :6]
    M[:, 6, 0] = M[:, 7, 1] = M[:, 8, 2] = M[:, 9, 6] = 1.0
    w, V = np.linalg.eig(M)
    real = np.abs(w.imag) < 1e-8 * np.maximum(1.0, np.abs(w.real))
    V = V.real
    last = V[:, 9, :]
    good = real & (np.abs(last) > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        xyz = V[:, 6:9, :] / last[:, None, :]  # (n, 3, 10)
    coeff = np.concatenate([xyz, np.ones((n, 1, 10))], axis=1)
    E = np.einsum("qar,qaij->qrij", np.nan_to_num(coeff), basis[ok])
    norm = np.linalg.norm(E.reshape(n, 10, 9), axis=2)
    good &= norm > 0
    E = E / np.where(norm > 0, norm, 1.0)[:, :, None, None]
    out[ok] = E
    valid[ok] = good
    valid[~ok] = False
    return out, valid


def _kernel_five(rays1, rays2):
    return five_point(rays1, rays2)


def _kernel_eight(rays1, rays2):
    E = eight_point(rays1, rays2)
    return E, np.ones(E.shape[:2], dtype=bool)


KERNELS = {"five_point": (5, _kernel_five), "eight_point": (8, _kernel_eight)}


def _samples(n, size, iterations, seed):
    rng = np.random.default_rng(seed)
    keys = rng.random((iterations, n))
    return np.argsort(keys, axis=1, kind="stable")[:, :size]


def ransac_essential(matches: FeatureMatches, params: RansacParams = RansacParams()):
    """Robust essential matrix; returns ``(E, inlier_indices)``.

    Hypotheses are ranked by their MSAC cost (sum of squared angular
    residuals truncated at the threshold); ties go to the lower hypothesis
    index. The winner is polished by a linear refit on its inliers when that
    lowers the cost.
    """
    n = len(matches)
    if n < MIN_MATCHES:
        raise TooFewMatches(f"need at least {MIN_MATCHES} matches, got {n}")
    size, kernel = KERNELS[params.kernel]
    r1, r2 = matches.rays1, matches.rays2
    samples = _samples(n, size, params.iterations, params.seed)
    # MSAC scoring: truncated squared residuals, so a loose model cannot win by absorbing one outlier
    thr2 = params.inlier_threshold**2
    best_cost, best_count, best_E = np.inf, -1, None
    for start in range(0, params.iterations, _BLOCK):
        idx = samples[start : start + _BLOCK]
        Es, valid = kernel(r1[idx], r2[idx])
        ang = epipolar_angles(Es, r1, r2)  # (K, S, N)
        costs = np.where(valid, np.minimum(ang * ang, thr2).sum(axis=-1), np.inf).reshape(-1)
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_cost = float(costs[j])
            best_count = int((ang.reshape(-1, n)[j] < params.inlier_threshold).sum())
            best_E = Es.reshape(-1, 3, 3)[j]
    if best_E is None or best_count < params.min_inliers:
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} inliers < {params.min_inliers}")
    E = project_to_essential(best_E)
    inliers = np.flatnonzero(epipolar_angles(E, r1, r2) < params.inlier_threshold)
    if len(inliers) >= MIN_MATCHES:
        refit = eight_point(r1[inliers], r2[inliers])[0]
        ang = epipolar_angles(refit, r1, r2)
        if np.minimum(ang * ang, thr2).sum() <= np.minimum(epipolar_angles(E, r1, r2) ** 2, thr2).sum():
            E, inliers = refit, np.flatnonzero(ang < params.inlier_threshold)
    return E, inliers


def essential_candidates(E):
    """The four (R21, t21) decompositions of an essential matrix."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Ra, Rb = U @ W @ Vt, U @ W.T @ Vt
    t = U[:, 2]
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def triangulate_depths(R21, t21, rays1, rays2):
    """Depths (lambda1, lambda2) with ``lambda2 ray2 = lambda1 R21 ray1 + t21``."""
    a = rays1 @ R21.T
    b = -rays2
    aa = (a * a).sum(1)
    bb = (b * b).sum(1)
    ab = (a * b).sum(1)
    at = a @ t21
    bt = b @ t21
    det = aa * bb - ab * ab
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (-at * bb + bt * ab) / det
        l2 = (-bt * aa + at * ab) / det
    bad = np.abs(det) < 1e-14
    l1[bad] = np.nan
    l2[bad] = np.nan
    return l1, l2


def _to_camera_motion(R21, t21):
    R = R21.T
    return ScaledMotion(R, -R @ t21)


def _from_camera_motion(m: ScaledMotion):
    R21 = m.rotation.T
    return R21, -R21 @ m.direction


def decompose_essential(E, matches: FeatureMatches, inliers) -> ScaledMotion:
    """Pick the decomposition with the most positive-depth votes."""
    inliers = np.asarray(inliers, dtype=int)
    if len(inliers) == 0:
        raise ValueError("decompose_essential needs at least one inlier")
    r1, r2 = matches.rays1[inliers], matches.rays2[inliers]
    votes = []
    cands = essential_candidates(E)
    for R21, t21 in cands:
        l1, l2 = triangulate_depths(R21, t21, r1, r2)
        votes.append(int(np.sum((l1 > 0) & (l2 > 0))))
    order = np.argsort(votes, kind="stable")[::-1]
    if votes[order[0]] - votes[order[1]] < 2:
        raise CheiralityAmbiguous(f"cheirality votes too close: {sorted(votes, reverse=True)}")
    R21, t21 = cands[order[0]]
    return _to_camera_motion(R21, t21)


def _tangent_basis(t):
    _, _, Vt = np.linalg.svd(t[None, :])
    return Vt[1:].T


def _retract(state, d):
    R21, t21 = state
    t = t21 + _tangent_basis(t21) @ d[3:]
    return R21 @ exp_so3(d[:3]), t / np.linalg.norm(t)


def epipolar_residuals(R21, t21, rays1, rays2):
    """Signed angle of each ray2 to the plane spanned by ``t21`` and ``R21 ray1``."""
    n = np.cross(t21, rays1 @ R21.T)
    nn = np.linalg.norm(n, axis=1)
    return np.arcsin(np.clip((n * rays2).sum(1) / np.where(nn > 0, nn, 1.0), -1.0, 1.0))


def refine_epipolar_angular(matches: FeatureMatches, inliers, init: ScaledMotion, max_iterations=100) -> Refinement:
    """Least-squares refinement of rotation and baseline direction; value is a ScaledMotion."""
    inliers = np.asarray(inliers, dtype=int)
    r1, r2 = matches.rays1[inliers], matches.rays2[inliers]
    sw = np.sqrt(matches.weights[inliers])

    def residual(state):
        return sw * epipolar_residuals(state[0], state[1], r1, r2)

    result = levenberg_marquardt(residual, _from_camera_motion(init), _retract, 5, max_iterations=max_iterations)
    if not result.converged:
        log.warning("epipolar refinement stopped after %d iterations", result.iterations)
    result.value = _to_camera_motion(*result.value)
    return result


def estimate_camera_motion(matches: FeatureMatches, params: RansacParams = RansacParams()) -> ScaledMotion:
    """RANSAC, decomposition and angular refinement in one call."""
    E, inliers = ransac_essential(matches, params)
    init = decompose_essential(E, matches, inliers)
    return refine_epipolar_angular(matches, inliers, init).value
