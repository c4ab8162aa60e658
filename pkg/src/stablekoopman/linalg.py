"""Dense real linear algebra for small matrices.

Everything here is a pure function of its inputs. Vectors are stacked
column-wise by :func:`vec`, so ``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.
"""

import math

import numpy as np

from .errors import ConvergenceError, DimensionError, DomainError

# Pade(13) numerator coefficients and the 1-norm bound under which the
# unscaled approximant is accurate to double precision (Higham, 2005).
PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
THETA13 = 5.371920351148152
UNDERFLOW_GUARD = math.sqrt(np.finfo(float).tiny)


def _as_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{name} has non-finite entries")
    return A


def scaling_exponent(norm1):
    """Number of squarings so that the scaled 1-norm is below THETA13."""
    if norm1 <= THETA13:
        return 0
    return max(0, int(math.ceil(math.log2(norm1 / THETA13))))


def pade13_expm(A, squarings, matmul, solve):
    """Scaling-and-squaring with a fixed order-13 Pade approximant.

    Written against ``matmul``/``solve`` callables so the same unrolled
    algorithm serves plain arrays and the autodiff tape. ``A`` may carry
    leading batch dimensions.
    """
    b = PADE13
    ident = np.eye(A.shape[-1])
    if squarings:
        A = A * (0.5 ** squarings)
    A2 = matmul(A, A)
    A4 = matmul(A2, A2)
    A6 = matmul(A4, A2)
    U = matmul(A6, b[13] * A6 + b[11] * A4 + b[9] * A2)
    U = U + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident
    U = matmul(A, U)
    V = matmul(A6, b[12] * A6 + b[10] * A4 + b[8] * A2)
    V = V + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    R = solve(V - U, V + U)
    for _ in range(squarings):
        R = matmul(R, R)
    return R


def norm1(A):
    """Max absolute column sum, maximised over any batch dimensions."""
    A = np.asarray(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(A), axis=-2)))


def matexp(A, t=1.0):
    """Return ``exp(t * A)``."""
    A = _as_square(A)
    t = float(t)
    if not math.isfinite(t):
        raise DomainError("t must be finite")
    tA = t * A
    if not np.any(tA):
        return np.eye(A.shape[0])
    s = scaling_exponent(norm1(tA))
    return pade13_expm(tA, s, np.matmul, np.linalg.solve)


def hessenberg(A):
    """Upper Hessenberg form of ``A`` by Householder reflections."""
    H = np.array(A, dtype=float)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        nx = np.linalg.norm(x)
        if nx == 0.0:
            continue
        alpha = -nx if x[0] >= 0 else nx
        v = x
        v[0] -= alpha
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        v /= nv
        H[k + 1:, :] -= 2.0 * np.outer(v, v @ H[k + 1:, :])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _hqr(H, budget):
    # Francis double-shift QR on an upper Hessenberg matrix (EISPACK hqr
    # lineage). 1-based indexing on a padded list keeps the recurrences
    # readable against the textbook form.
    n = len(H)
    a = [[0.0] * (n + 1)] + [[0.0] + [float(v) for v in row] for row in H]
    wr = [0.0] * (n + 1)
    wi = [0.0] * (n + 1)
    anorm = 0.0
    for i in range(1, n + 1):
        for j in range(max(i - 1, 1), n + 1):
            anorm += abs(a[i][j])
    nn = n
    t = 0.0
    total = 0
    x = y = z = w = p = q = r = 0.0
    while nn >= 1:
        its = 0
        while True:
            l = 1
            for ll in range(nn, 1, -1):
                s = abs(a[ll - 1][ll - 1]) + abs(a[ll][ll])
                if s == 0.0:
                    s = anorm
                if abs(a[ll][ll - 1]) + s == s:
                    a[ll][ll - 1] = 0.0
                    l = ll
                    break
            x = a[nn][nn]
            if l == nn:
                wr[nn] = x + t
                wi[nn] = 0.0
                nn -= 1
                break
            y = a[nn - 1][nn - 1]
            w = a[nn][nn - 1] * a[nn - 1][nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z:
                        wr[nn] = x - w / z
                    wi[nn - 1] = wi[nn] = 0.0
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1] = z
                    wi[nn] = -z
                nn -= 2
                break
            if total >= budget:
                raise ConvergenceError("QR iteration did not converge", total)
            if its in (10, 20):
                # exceptional shift
                t += x
                for i in range(1, nn + 1):
                    a[i][i] -= x
                s = abs(a[nn][nn - 1]) + abs(a[nn - 1][nn - 2])
                y = x = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            total += 1
            m = nn - 2
            while m >= l:
                z = a[m][m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1][m] + a[m][m + 1]
                q = a[m + 1][m + 1] - z - r - s
                r = a[m + 2][m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(a[m][m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1][m - 1]) + abs(z) + abs(a[m + 1][m + 1]))
                if u + v == v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                a[i][i - 2] = 0.0
                if i != m + 2:
                    a[i][i - 3] = 0.0
            for k in range(m, nn):
                if k != m:
                    p = a[k][k - 1]
                    q = a[k + 1][k - 1]
                    r = a[k + 2][k - 1] if k != nn - 1 else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s == 0.0:
                    continue
                if k == m:
                    if l != m:
                        a[k][k - 1] = -a[k][k - 1]
                else:
                    a[k][k - 1] = -s * x
                p += s
                x = p / s
                y = q / s
                z = r / s
                q /= p
                r /= p
                rk, rk1 = a[k], a[k + 1]
                rk2 = a[k + 2] if k != nn - 1 else None
                for j in range(k, nn + 1):
                    p = rk[j] + q * rk1[j]
                    if rk2 is not None:
                        p += r * rk2[j]
                        rk2[j] -= p * z
                    rk1[j] -= p * y
                    rk[j] -= p * x
                mmin = min(nn, k + 3)
                for i in range(l, mmin + 1):
                    ai = a[i]
                    p = x * ai[k] + y * ai[k + 1]
                    if k != nn - 1:
                        p += z * ai[k + 2]
                        ai[k + 2] -= p * r
                    ai[k + 1] -= p * q
                    ai[k] -= p
            if l >= nn - 1:
                break
    return np.array(wr[1:]) + 1j * np.array(wi[1:])


def eigenvalues(A):
    """All eigenvalues of a real square matrix, with multiplicity.

    Hessenberg reduction followed by double-shift QR with a total budget of
    ``30 * D`` iterations. Conjugate pairs are returned exactly conjugate.
    """
    A = _as_square(A)
    n = A.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex)
    if n == 1:
        return np.array([complex(A[0, 0])])
    H = hessenberg(A)
    # entries this far below the norm only cause underflow inside the sweeps
    H[np.abs(H) < UNDERFLOW_GUARD * np.max(np.abs(H))] = 0.0
    lam = _hqr(H, budget=30 * n)
    return sort_spectrum(lam)


def sort_spectrum(lam):
    """Order by descending real part, then descending imaginary part."""
    lam = np.asarray(lam, dtype=complex)
    order = np.lexsort((-lam.imag, -lam.real))
    return lam[order]


def thin_svd(X):
    """Economy SVD ``X = U @ diag(s) @ V.T`` with ``s`` descending."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or min(X.shape) < 1:
        raise DimensionError(f"thin_svd needs a non-empty matrix, got shape {X.shape}")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return U, s, Vt.T


def kron_sum(A, B):
    """Kronecker sum ``A (+) B = kron(A, I) + kron(I, B)``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != B.shape:
        raise DimensionError(f"kron_sum needs equal square matrices, got {A.shape} and {B.shape}")
    ident = np.eye(A.shape[0])
    return np.kron(A, ident) + np.kron(ident, B)


def vec(X):
    return np.asarray(X).reshape(-1, order="F")


def unvec(v, rows):
    v = np.asarray(v)
    return v.reshape(rows, v.size // rows, order="F")


def _diag_psd(Lam, D):
    Lam = np.asarray(Lam, dtype=float)
    if Lam.ndim == 1:
        d = Lam
    elif Lam.ndim == 2:
        if Lam.shape != (D, D):
            raise DimensionError(f"noise covariance must be {D}x{D}, got {Lam.shape}")
        d = np.diag(Lam)
        if np.any(Lam - np.diag(d) != 0.0):
            raise DomainError("noise covariance must be diagonal")
    else:
        raise DimensionError("noise covariance must be a vector or a diagonal matrix")
    if d.shape != (D,):
        raise DimensionError(f"noise covariance needs {D} entries, got {d.shape}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise DomainError("noise covariance entries must be finite and nonnegative")
    return np.diag(d)


def _adaptive_simpson(f, a, b, tol, max_depth=50):
    def simpson(fa, fm, fb, h):
        return (h / 6.0) * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        err = left + right - whole
        if depth >= max_depth or np.max(np.abs(err)) <= 15.0 * tol:
            return left + right + err / 15.0
        return (recurse(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
                + recurse(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1))

    fa, fb = f(a), f(b)
    fm = f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 0)


def ou_covariance_quadrature(K, Lam, t, tol=1e-9):
    """``ou_covariance`` by adaptive Simpson quadrature of the integrand."""
    K = _as_square(K, "K")
    L = _diag_psd(Lam, K.shape[0])
    if t < 0:
        raise DomainError("t must be nonnegative")
    if t == 0:
        return np.zeros_like(K)

    def integrand(s):
        E = matexp(K, s)
        return E.T @ L @ E

    S = _adaptive_simpson(integrand, 0.0, float(t), tol)
    return 0.5 * (S + S.T)


def ou_covariance(K, Lam, t):
    """Covariance at time ``t`` of the row-vector Ornstein-Uhlenbeck process.

    For ``d phi = phi K dt + dB Lam^(1/2)`` started from a point, the
    covariance is ``int_0^t exp(s K^T) Lam exp(s K) ds``; it solves
    ``dS/dt = K^T S + S K + Lam`` with ``S(0) = 0``. Computed through the
    Kronecker sum ``M = K^T (+) K^T``; falls back to quadrature when ``M`` is
    numerically singular.
    """
    K = _as_square(K, "K")
    D = K.shape[0]
    L = _diag_psd(Lam, D)
    t = float(t)
    if not t >= 0:
        raise DomainError("t must be nonnegative")
    if t == 0:
        return np.zeros((D, D))
    M = kron_sum(K.T, K.T)
    if np.linalg.cond(M) > 1e10:
        return ou_covariance_quadrature(K, L, t)
    E = matexp(M, t)
    v = np.linalg.solve(M, (E - np.eye(D * D)) @ vec(L))
    S = unvec(v, D)
    return 0.5 * (S + S.T)
