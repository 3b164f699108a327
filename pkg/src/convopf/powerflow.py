"""Newton-Raphson AC power flow in polar coordinates.

Used to check that a dispatch found by an optimiser is physically
realisable: active outputs and voltage setpoints of generator buses are
held, the slack bus closes the active balance and generator buses absorb
whatever reactive power the network asks for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .case_io import NetworkData
from .network import AdmittanceMatrix

__all__ = ["PfSolution", "newton_raphson_pf", "dispatch_from_point", "bus_mismatch"]


@dataclass
class PfSolution:
    V: np.ndarray
    theta: np.ndarray
    converged: bool
    mismatch: float  # max |P, Q mismatch| in p.u.
    iterations: int
    status: str  # Converged | Diverged | MaxIter
    pg: np.ndarray  # per generator, slack output recomputed
    qg: np.ndarray
    history: list


def dispatch_from_point(net: NetworkData, point: dict) -> dict:
    """``{"Pg", "V", "theta"}`` arrays from an OPF point keyed by variable name."""
    return {
        "Pg": np.array([point[f"Pg[{i}]"] for i in range(net.n_gen)]),
        "V": np.array([point[f"V[{k}]"] for k in range(net.n_bus)]),
        "theta": np.array([point.get(f"theta[{k}]", 0.0) for k in range(net.n_bus)]),
    }


def bus_mismatch(net: NetworkData, Y: AdmittanceMatrix, V, theta, pg, qg) -> np.ndarray:
    """Complex mismatch ``S_gen - S_load - S_injected`` per bus (p.u.)."""
    v = V * np.exp(1j * theta)
    s_inj = v * np.conj(Y.Y @ v)
    sg = np.zeros(net.n_bus, dtype=complex)
    np.add.at(sg, net.gen_bus, pg + 1j * qg)
    return sg - (net.pd + 1j * net.qd) - s_inj


def _dS(Ybus, v):
    """Partial derivatives of bus injections w.r.t. angle and magnitude."""
    ib = Ybus @ v
    dv = sp.diags(v)
    di = sp.diags(ib)
    vnorm = sp.diags(v / np.abs(v))
    dS_dth = 1j * dv @ (di - Ybus @ dv).conj()
    dS_dvm = dv @ (Ybus @ vnorm).conj() + di.conj() @ vnorm
    return dS_dth, dS_dvm


def newton_raphson_pf(net: NetworkData, Y: AdmittanceMatrix, dispatch: dict, tol: float = 1e-8,
                      max_iter: int = 30, diverge_after: int = 5) -> PfSolution:
    """Solve the power flow for fixed ``dispatch["Pg"]`` and generator-bus voltages.

    ``dispatch["V"]`` supplies setpoints at generator buses and the start
    elsewhere; ``dispatch.get("theta")`` is an optional angle start.
    """
    n = net.n_bus
    pg = np.asarray(dispatch["Pg"], dtype=float).copy()
    V = np.asarray(dispatch["V"], dtype=float).copy()
    th = np.asarray(dispatch.get("theta", np.zeros(n)), dtype=float).copy()
    th = th - th[net.slack]
    has_gen = np.zeros(n, dtype=bool)
    has_gen[net.gen_bus] = True
    pv = np.array([k for k in range(n) if k != net.slack and has_gen[k]], dtype=int)
    pq = np.array([k for k in range(n) if k != net.slack and not has_gen[k]], dtype=int)
    pvpq = np.concatenate([pv, pq])
    Ybus = Y.Y.tocsc()

    p_spec = np.zeros(n)
    np.add.at(p_spec, net.gen_bus, pg)
    p_spec -= net.pd
    q_spec = -net.qd

    def F(V, th):
        v = V * np.exp(1j * th)
        s = v * np.conj(Ybus @ v)
        return np.concatenate([s.real[pvpq] - p_spec[pvpq], s.imag[pq] - q_spec[pq]]), v

    f, v = F(V, th)
    norm = np.abs(f).max(initial=0.0)
    history = [norm]
    status = "MaxIter"
    growth = 0
    it = 0
    while True:
        if norm <= tol:
            status = "Converged"
            break
        if it >= max_iter:
            break
        it += 1
        dth, dvm = _dS(Ybus, v)
        J = sp.bmat(
            [
                [dth.real[pvpq][:, pvpq], dvm.real[pvpq][:, pq]],
                [dth.imag[pq][:, pvpq], dvm.imag[pq][:, pq]],
            ],
            format="csc",
        )
        try:
            dx = spla.spsolve(J, -f)
        except RuntimeError:
            status = "Diverged"
            break
        if not np.all(np.isfinite(dx)):
            status = "Diverged"
            break
        th[pvpq] += dx[: len(pvpq)]
        V[pq] += dx[len(pvpq):]
        f, v = F(V, th)
        new = np.abs(f).max(initial=0.0)
        growth = growth + 1 if new > norm else 0
        norm = new
        history.append(norm)
        if growth >= diverge_after or not np.isfinite(norm):
            status = "Diverged"
            break

    # generator outputs implied by the solved state
    s = v * np.conj(Ybus @ v) + net.pd + 1j * net.qd
    qg = np.zeros(net.n_gen)
    pg_out = pg.copy()
    for k in np.unique(net.gen_bus):
        idx = np.flatnonzero(net.gen_bus == k)
        qg[idx] = s[k].imag / len(idx)
        if k == net.slack:
            pg_out[idx[0]] = s[k].real - pg[idx[1:]].sum()
    return PfSolution(V, th, status == "Converged", float(norm), it, status, pg_out, qg, history)
