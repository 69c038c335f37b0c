"""Laplace-Beltrami eigenbasis, heat diffusion and heat kernel signatures."""

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import DomainError, NumericError
from .store import CorruptStoreError, read_store, write_store

DENSE_MAX_N = 512
DEFAULT_K_EIG = 128
RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class SpectralBasis:
    """Eigenpairs of ``L phi = lam W phi``, ascending, W-orthonormal."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray

    @property
    def k_eig(self):
        return len(self.eigenvalues)

    @property
    def n(self):
        return self.eigenvectors.shape[0]

    def truncated(self, k):
        return SpectralBasis(self.eigenvalues[:k], self.eigenvectors[:, :k], self.mass)

    def permuted(self, perm):
        return SpectralBasis(self.eigenvalues, self.eigenvectors[perm], self.mass[perm])


def residuals(ops_L, mass, basis):
    """Column-wise ``||L phi - lam W phi||_2``."""
    phi = basis.eigenvectors
    r = ops_L @ phi - (mass[:, None] * phi) * basis.eigenvalues[None, :]
    return np.linalg.norm(r, axis=0)


def _standard_form(L, mass):
    d = 1.0 / np.sqrt(mass)
    return (sparse.diags(d) @ L @ sparse.diags(d)).tocsr(), d


def _dense_eigs(S, k):
    lam, y = sla.eigh(S.toarray())
    return lam[:k], y[:, :k]


def _orthonormalize_against(Z, Q, rng):
    """Orthonormalize the columns of Z against Q (two passes) and each other."""
    for _ in range(2):
        if Q.shape[1]:
            Z = Z - Q @ (Q.T @ Z)
    q, r = np.linalg.qr(Z)
    # rank-deficient directions are replaced by fresh random ones
    weak = np.abs(np.diag(r)) < 1e-10 * max(1.0, np.abs(r).max())
    if weak.any():
        fresh = rng.standard_normal((Z.shape[0], int(weak.sum())))
        for _ in range(2):
            fresh -= Q @ (Q.T @ fresh)
            fresh -= q[:, ~weak] @ (q[:, ~weak].T @ fresh)
        fresh, _ = np.linalg.qr(fresh)
        q = np.concatenate([q[:, ~weak], fresh], axis=1)
    return q


def block_lanczos(S, k, *, sigma, seed=0, block=8, tol=1e-9, max_dim=None):
    """Smallest ``k`` eigenpairs of sparse symmetric ``S`` by shift-invert block Lanczos.

    Every new block is fully reorthogonalized against the whole Krylov basis,
    so Ritz values come from the exact projection ``Q^T (S - sigma)^-1 Q``.
    A block size above the largest eigenvalue multiplicity lets degenerate
    eigenspaces be captured in full.
    """
    n = S.shape[0]
    rng = np.random.default_rng(seed)
    lu = splu((S - sigma * sparse.identity(n, format="csc")).tocsc())
    max_dim = min(n, max_dim or max(5 * k + 8 * block, k + 200))
    scale = abs(S).sum(axis=1).max()

    Q = np.empty((n, 0))
    AQ = np.empty((n, 0))
    V = _orthonormalize_against(rng.standard_normal((n, block)), Q, rng)
    worst = np.inf
    check_every = max(1, (k // block) // 2)
    n_blocks = 0
    while True:
        Q = np.concatenate([Q, V], axis=1)
        AQ = np.concatenate([AQ, lu.solve(V)], axis=1)
        n_blocks += 1
        m = Q.shape[1]
        done = m >= max_dim
        if m >= k + block and (n_blocks % check_every == 0 or done):
            T = Q.T @ AQ
            theta, s = np.linalg.eigh(0.5 * (T + T.T))
            order = np.argsort(-theta)[:k]
            Y = Q @ s[:, order]
            lam = np.einsum("ij,ij->j", Y, S @ Y)
            res = np.linalg.norm(S @ Y - Y * lam, axis=0)
            worst = float(res.max() / scale)
            if worst <= tol:
                order = np.argsort(lam, kind="stable")
                return lam[order], Y[:, order]
        if done:
            break
        V = _orthonormalize_against(AQ[:, -block:], Q, rng)
        V = V[:, : min(block, max_dim - m)]
    raise NumericError(
        f"Lanczos did not converge: Krylov dimension {m}, worst relative residual {worst:.3e} > {tol:.1e}"
    )


def eigendecompose(ops, k_eig=DEFAULT_K_EIG, *, seed=0, method="auto", tol=1e-9):
    """Solve ``L phi = lam W phi`` for the ``k_eig`` smallest eigenpairs.

    ``method`` is ``"dense"``, ``"lanczos"`` or ``"auto"`` (dense for
    ``N <= 512`` or a complete basis). The result is W-orthonormal with
    ``lam_0 ~ 0``.
    """
    n = ops.n
    if not 1 <= k_eig <= n:
        raise DomainError(f"k_eig must satisfy 1 <= k_eig <= N={n}, got {k_eig}")
    if method == "auto":
        method = "dense" if n <= DENSE_MAX_N or k_eig == n else "lanczos"
    if method == "lanczos" and k_eig == n:
        raise DomainError("the Lanczos solver needs k_eig < N; use the dense method for a complete basis")
    S, d = _standard_form(ops.L, np.asarray(ops.mass))
    if method == "dense":
        lam, y = _dense_eigs(S, k_eig)
    elif method == "lanczos":
        # shift slightly below zero so the singular L stays factorizable
        sigma = -1e-3 * float(S.diagonal().mean())
        lam, y = block_lanczos(S, k_eig, sigma=sigma, seed=seed, tol=tol)
    else:
        raise DomainError(f"unknown eigensolver method {method!r}")
    lam = np.maximum(lam, 0.0)
    phi = d[:, None] * y
    basis = SpectralBasis(lam, phi, np.asarray(ops.mass, dtype=np.float64))
    res = residuals(ops.L, basis.mass, basis)
    bound = RESIDUAL_TOL * abs(ops.L).sum(axis=1).max()
    if res.max() > bound:
        raise NumericError(f"eigenpair residual {res.max():.3e} exceeds {bound:.3e}")
    return basis


def diffuse(basis, x, t):
    """Spectral heat diffusion, one time per channel: ``Phi (e^{-lam t} * Phi^T W x)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != basis.n:
        raise DomainError(f"x has {x.shape[0]} rows, basis has {basis.n}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[1],))
    if np.any(t < 0):
        raise DomainError("diffusion times must be nonnegative")
    coeff = basis.eigenvectors.T @ (basis.mass[:, None] * x)
    out = basis.eigenvectors @ (np.exp(-np.outer(basis.eigenvalues, t)) * coeff)
    return out[:, 0] if squeeze else out


def log_time_samples(t_min=0.01, t_max=1.0, count=16):
    """``count`` diffusion times in geometric progression over ``[t_min, t_max]``."""
    if count < 1:
        raise DomainError("count must be >= 1")
    if not (t_min > 0 and t_max > 0):
        raise DomainError("diffusion times must be positive")
    if count == 1:
        if t_min != t_max:
            raise DomainError("a single sample needs t_min == t_max")
        return np.array([float(t_min)])
    if not t_min < t_max:
        raise DomainError("need t_min < t_max")
    ts = np.geomspace(t_min, t_max, count)
    ts[0], ts[-1] = t_min, t_max
    return ts


def compute_hks(basis, ts):
    """Heat kernel signature ``sum_m exp(-lam_m t) phi_m(x)^2`` for each vertex and time."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 1 or np.any(ts <= 0) or np.any(np.diff(ts) <= 0):
        raise DomainError("time samples must be positive and strictly increasing")
    return (basis.eigenvectors ** 2) @ np.exp(-np.outer(basis.eigenvalues, ts))


def save_basis(directory, basis, mesh_hash):
    write_store(directory, {"eigenvalues": basis.eigenvalues, "eigenvectors": basis.eigenvectors,
                            "mass_diag": basis.mass},
                meta={"kind": "spectral", "N": int(basis.n), "k_eig": int(basis.k_eig), "mesh_hash": mesh_hash})


def load_basis(directory, mesh_hash, k_eig=None):
    """Cached basis, or None when absent, stale (hash or k_eig mismatch) or corrupt."""
    try:
        arrays, manifest = read_store(directory, ["eigenvalues", "eigenvectors", "mass_diag"])
    except (FileNotFoundError, CorruptStoreError):
        return None
    if manifest.get("mesh_hash") != mesh_hash:
        return None
    if k_eig is not None and manifest.get("k_eig") != k_eig:
        return None
    return SpectralBasis(arrays["eigenvalues"], arrays["eigenvectors"], arrays["mass_diag"])
