"""Factorizations running natively on the kernel substrate.

LU, Cholesky, solve, symmetric eigenvalues, singular values, and the
pseudo-inverse are all driven as sequences of device kernels (pivot search,
row swaps, rank-1 trailing updates, Jacobi rotations); only pivot decisions
travel to the host.
"""

import numpy as np

import devmat as dm

dm.init("reference")
dm.set_seed(7)
n = 128


def rel(x, y):
    return np.linalg.norm(x - y) / np.linalg.norm(y)


A = dm.evaluate(dm.randu(n, n) + 0.5 * dm.eye(n, n))

L, U, P = dm.lu(A)
res = rel(P.to_matrix().to_numpy() @ A.to_numpy(), L.to_numpy() @ U.to_numpy())
print(f"lu reconstruction    |PA - LU|/|A|   = {res:.2e}")

Lf, Uf = dm.lu_folded(A)
print(f"folded form          |A - LU|/|A|    = "
      f"{rel(Lf.to_numpy() @ Uf.to_numpy(), A.to_numpy()):.2e}")

S = dm.evaluate(A.t() @ A + float(n) * dm.eye(n, n))
R = dm.chol(S)
print(f"cholesky             |S - R'R|/|S|   = "
      f"{rel(R.to_numpy().T @ R.to_numpy(), S.to_numpy()):.2e}")

B = dm.Matrix(n, 3, fill="randu")
X = dm.solve(S, B)
print(f"solve                |SX - B|/|B|    = "
      f"{rel(S.to_numpy() @ X.to_numpy(), B.to_numpy()):.2e}")

vals = dm.eig_sym(S).to_numpy().ravel()
print(f"eig_sym              sum(lambda)     = {vals.sum():.6g} "
      f"(trace = {dm.trace(S):.6g})")

sv = dm.svd(dm.Matrix(40, 25, fill="randu")).to_numpy().ravel()
print(f"svd                  descending?       {bool(np.all(np.diff(sv) <= 0))}")

T = dm.Matrix(20, 10, fill="randu")
Tp = dm.pinv(T)
ht, hp = T.to_numpy().astype(np.float64), Tp.to_numpy().astype(np.float64)
print(f"pinv                 |A A+ A - A|/|A| = {rel(ht @ hp @ ht, ht):.2e}")

print(f"det(2I_3)            = {dm.det(dm.evaluate(2 * dm.eye(3, 3))):.6g}")
print(f"norm([3,4], 2)       = "
      f"{dm.norm(dm.Matrix.from_numpy(np.array([[3.], [4.]], dtype=np.float32)), 2):.6g}")

dm.shutdown()
