#!/usr/bin/env python3
"""Solve an SDPA sparse-format instance with cvxpy.

Reads `min c^T y  s.t.  sum_i y_i F_i - F_0 >= 0` and prints the optimal
objective, one number on stdout. Negative block sizes are diagonal blocks.
"""

import argparse
import re
import sys

import cvxpy as cp
import numpy as np
import scipy.sparse as sp


def tokens(line):
    return re.sub(r"[,{}()]", " ", line).split()


def read_sdpa(path):
    with open(path) as fh:
        lines = [l.strip() for l in fh]
    lines = [l for l in lines if l and l[0] not in '"*']
    m = int(tokens(lines[0])[0])
    nblocks = int(tokens(lines[1])[0])
    sizes = [int(t) for t in tokens(lines[2])[:nblocks]]
    c = np.array([float(t) for t in tokens(lines[3])[:m]])
    entries = [[] for _ in range(nblocks)]
    for line in lines[4:]:
        t = tokens(line)
        mat, blk, i, j = (int(x) for x in t[:4])
        entries[blk - 1].append((mat, i - 1, j - 1, float(t[4])))
    return m, sizes, c, entries


def build(m, sizes, c, entries):
    y = cp.Variable(m)
    cons = []
    for size, ent in zip(sizes, entries):
        n = abs(size)
        rows, cols, vals = [], [], []
        f0 = np.zeros(n * n if size > 0 else n)
        for mat, i, j, v in ent:
            if size > 0:
                idx = [i * n + j] if i == j else [i * n + j, j * n + i]
            else:
                idx = [i]
            for k in idx:
                if mat == 0:
                    f0[k] += v
                else:
                    rows.append(k)
                    cols.append(mat - 1)
                    vals.append(v)
        a = sp.csr_matrix((vals, (rows, cols)), shape=(len(f0), m))
        expr = a @ y - f0
        if size > 0:
            s = cp.Variable((n, n), PSD=True)
            cons.append(cp.vec(s, order="C") == expr)
        else:
            cons.append(expr >= 0)
    return cp.Problem(cp.Minimize(c @ y), cons)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("path")
    ap.add_argument("--solver", default="CVXOPT", choices=["CVXOPT", "SCS", "CLARABEL"])
    args = ap.parse_args()
    prob = build(*read_sdpa(args.path))
    opts = {"eps": 1e-9, "max_iters": 200000} if args.solver == "SCS" else {}
    prob.solve(solver=args.solver, **opts)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        print(prob.status, file=sys.stderr)
        sys.exit(2)
    print(f"{prob.value:.12e}")


if __name__ == "__main__":
    main()
