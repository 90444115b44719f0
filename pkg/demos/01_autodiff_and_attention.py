"""Gradients, masks and the attention operator, by hand.

Run: python demos/01_autodiff_and_attention.py
"""
import numpy as np

from sparselab import tensor as tn
from sparselab.attention import MaskSpec, attend, build_agnostic_mask, topk_matrix

rng = np.random.default_rng(0)

# A tiny loss through matmul, GELU and a sum, checked against a central difference.
A = tn.tensor(rng.normal(size=(3, 4)), requires_grad=True)
B = tn.tensor(rng.normal(size=(4, 2)))
loss = tn.sum(tn.activation(tn.matmul(A, B), "gelu"))
tn.backward(loss)

h = 1e-5
Ap, Am = A.data.copy(), A.data.copy()
Ap[1, 2] += h
Am[1, 2] -= h
f = lambda a: tn.sum(tn.activation(tn.matmul(tn.tensor(a), B), "gelu")).item()
print("autodiff dL/dA[1,2] =", A.grad[1, 2])
print("central difference  =", (f(Ap) - f(Am)) / (2 * h))

# Masks are (keys, queries): column i lists the keys that query i may read.
L = 8
for kind, p in [("band", 1), ("block", 4), ("stride", 3)]:
    M = build_agnostic_mask(kind, L, p).matrix
    print(f"\n{kind}:{p}  (rows = keys, columns = queries)")
    print("\n".join("".join("#" if v else "." for v in row) for row in M))

# A global token is appended as the last position; it sees, and is seen by, everything.
G = build_agnostic_mask("block", L + 1, 4, n_global=1).matrix
print("\nblock:4 plus one global token")
print("\n".join("".join("#" if v else "." for v in row) for row in G))

# Top-k keeps the k largest scores in each column, ties broken toward low index.
D = np.array([[3.0, 1.0], [3.0, 5.0], [0.0, 5.0]])
print("\ntop-2 of\n", D, "\n->\n", topk_matrix(D, 2).astype(int))

# Attention: with W = 0 every allowed key gets equal weight.
d = 4
X = tn.tensor(rng.normal(size=(d, L)))
W = tn.tensor(np.zeros((d, d)))
V = tn.tensor(np.eye(d))
out = attend(X, W, V, "block:4")
print("\nW=0, block:4: output column 0 equals the mean of columns 0..3:",
      np.allclose(out.data[:, 0], X.data[:, :4].mean(axis=1)))
print("parsed spec:", MaskSpec.parse("band:5+g1"))
