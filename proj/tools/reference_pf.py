#!/usr/bin/env python3
"""Independent Newton power-flow reference.

Parses a MATPOWER case file and solves the power flow with the complex-form
Jacobian (dS/dV), which shares no code with the C++ solver's polar analytic
derivatives. Used to freeze reference voltages for the acceptance suite:

    python3 tools/reference_pf.py data/case39.m tests/data/case39_ref.json
"""
import json
import re
import sys

import numpy as np


def parse_matrix(text, name):
    m = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S)
    if m is None:
        raise ValueError("missing mpc.%s" % name)
    rows = []
    for line in m.group(1).replace(";", "\n").splitlines():
        line = line.split("%")[0].strip()
        if line:
            rows.append([float(t) for t in line.split()])
    return np.array(rows)


def solve_case(path, tol=1e-10, max_iter=30):
    text = open(path).read()
    text = re.sub(r"%.*", "", text)
    base = float(re.search(r"mpc\.baseMVA\s*=\s*([\d.eE+-]+)", text).group(1))
    bus = parse_matrix(text, "bus")
    gen = parse_matrix(text, "gen")
    branch = parse_matrix(text, "branch")

    n = bus.shape[0]
    ext2int = {int(b): i for i, b in enumerate(bus[:, 0])}
    types = bus[:, 1].astype(int)
    pq = np.where(types == 1)[0]
    pv = np.where(types == 2)[0]
    slack = np.where(types == 3)[0]
    assert len(slack) == 1
    pvpq = np.sort(np.concatenate([pv, pq]))

    Y = np.zeros((n, n), dtype=complex)
    for row in branch:
        if row[10] == 0:
            continue
        f, t = ext2int[int(row[0])], ext2int[int(row[1])]
        ys = 1.0 / complex(row[2], row[3])
        bc = 1j * row[4] / 2.0
        tap = row[8] if row[8] != 0 else 1.0
        shift = np.exp(1j * np.deg2rad(row[9]))
        Y[f, f] += (ys + bc) / (tap * tap)
        Y[t, t] += ys + bc
        Y[f, t] += -ys / (tap * np.conj(shift))
        Y[t, f] += -ys / (tap * shift)
    Y[np.arange(n), np.arange(n)] += (bus[:, 4] + 1j * bus[:, 5]) / base

    # specified injections
    S = -(bus[:, 2] + 1j * bus[:, 3]) / base
    vm = np.ones(n)
    va = np.full(n, np.deg2rad(bus[slack[0], 8]))
    for row in gen:
        if row[7] <= 0:
            continue
        i = ext2int[int(row[0])]
        S[i] += row[1] / base
        if types[i] != 1:
            vm[i] = row[5]
    va[slack] = np.deg2rad(bus[slack, 8])

    V = vm * np.exp(1j * va)
    for it in range(1, max_iter + 1):
        Ibus = Y @ V
        mis = V * np.conj(Ibus) - S
        F = np.concatenate([mis[pvpq].real, mis[pq].imag])
        if np.max(np.abs(F)) < tol:
            return V, it - 1, True, base, bus
        dV = np.diag(V / np.abs(V))
        dSdVm = dV @ np.conj(np.diag(Ibus)) + np.diag(V) @ np.conj(Y @ dV)
        dSdVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        J = np.block([
            [dSdVa[np.ix_(pvpq, pvpq)].real, dSdVm[np.ix_(pvpq, pq)].real],
            [dSdVa[np.ix_(pq, pvpq)].imag, dSdVm[np.ix_(pq, pq)].imag],
        ])
        dx = np.linalg.solve(J, F)
        va[pvpq] -= dx[: len(pvpq)]
        vm[pq] -= dx[len(pvpq):]
        V = vm * np.exp(1j * va)
    return V, max_iter, False, base, bus


def main():
    case_path, out_path = sys.argv[1], sys.argv[2]
    V, iters, ok, base, bus = solve_case(case_path)
    if not ok:
        print("did not converge", file=sys.stderr)
        sys.exit(1)
    vm, va = np.abs(V), np.angle(V)
    # sanity: compare with the solved voltages recorded in the bus table
    dvm = np.max(np.abs(vm - bus[:, 7]))
    dva = np.max(np.abs(np.rad2deg(va) - bus[:, 8]))
    print(f"{case_path}: converged in {iters} iterations; "
          f"bus-table deltas: vm {dvm:.2e} p.u., va {dva:.2e} deg")
    with open(out_path, "w") as f:
        json.dump({"case": case_path.split("/")[-1], "iterations": iters,
                   "vm": vm.tolist(), "va": va.tolist()}, f, indent=1)


if __name__ == "__main__":
    main()
