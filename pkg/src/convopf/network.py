"""Bus admittance matrix and branch flow evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .case_io import NetworkData

__all__ = [
    "UnsupportedBranchError",
    "AdmittanceMatrix",
    "build_admittance",
    "branch_blocks",
    "apparent_flow_sq",
    "injections",
    "branch_flows",
]


class UnsupportedBranchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """``Y = G + jB`` with the per-branch pi-model blocks.

    ``yff, yft, ytf, ytt`` are complex arrays (one entry per branch) such that
    the from/to terminal currents are ``I_f = yff V_f + yft V_t`` and
    ``I_t = ytf V_f + ytt V_t``.
    """

    n: int
    G: sp.csr_matrix
    B: sp.csr_matrix
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    shunt: np.ndarray  # complex bus shunt admittance gs + j bs

    @property
    def Y(self) -> sp.csr_matrix:
        return (self.G + 1j * self.B).tocsr()


def branch_blocks(r, x, b, tap):
    r = np.asarray(r, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any((r == 0) & (x == 0)):
        bad = np.flatnonzero((r == 0) & (x == 0)).tolist()
        raise UnsupportedBranchError(f"zero-impedance branch(es) {bad}")
    ys = 1.0 / (r + 1j * x)
    ych = 0.5j * np.asarray(b, dtype=float)
    t = np.asarray(tap, dtype=float)
    ytt = ys + ych
    yff = ytt / (t * t)
    yft = -ys / t
    ytf = -ys / t
    return yff, yft, ytf, ytt


def build_admittance(net: NetworkData) -> AdmittanceMatrix:
    if np.any(net.shift != 0.0):
        bad = np.flatnonzero(net.shift != 0.0).tolist()
        raise UnsupportedBranchError(f"phase-shifting branch(es) {bad} are unsupported")
    n = net.n_bus
    f, t = net.f_bus, net.t_bus
    yff, yft, ytf, ytt = branch_blocks(net.r, net.x, net.b, net.tap)
    shunt = net.gs + 1j * net.bs
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, shunt])
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    G = sp.csr_matrix((Y.data.real, Y.indices, Y.indptr), shape=(n, n))
    B = sp.csr_matrix((Y.data.imag, Y.indices, Y.indptr), shape=(n, n))
    return AdmittanceMatrix(n, G, B, yff, yft, ytf, ytt, f.copy(), t.copy(), shunt)


def _complex_v(V, theta):
    return np.asarray(V) * np.exp(1j * np.asarray(theta))


def injections(Y: AdmittanceMatrix, V, theta):
    """Complex bus injection ``S = V conj(Y V)`` in p.u."""
    v = _complex_v(V, theta)
    return v * np.conj(Y.Y @ v)


def branch_flows(Y: AdmittanceMatrix, V, theta):
    """Complex power entering each branch at its from and to terminals."""
    v = _complex_v(V, theta)
    vf, vt = v[Y.f_bus], v[Y.t_bus]
    sf = vf * np.conj(Y.yff * vf + Y.yft * vt)
    st = vt * np.conj(Y.ytf * vf + Y.ytt * vt)
    return sf, st


def apparent_flow_sq(branch, V, theta):
    """Squared apparent power ``(|S_from|^2, |S_to|^2)`` of one branch.

    ``branch`` is any object with ``r, x, b, tap`` attributes plus integer
    ``from_bus``/``to_bus`` indices into ``V`` and ``theta`` (a
    :class:`~convopf.case_io.BranchRecord` after renumbering, for instance).
    """
    yff, yft, ytf, ytt = (a[0] for a in branch_blocks([branch.r], [branch.x], [branch.b], [branch.tap]))
    vf = V[branch.from_bus] * np.exp(1j * theta[branch.from_bus])
    vt = V[branch.to_bus] * np.exp(1j * theta[branch.to_bus])
    sf = vf * np.conj(yff * vf + yft * vt)
    st = vt * np.conj(ytf * vf + ytt * vt)
    return float(abs(sf) ** 2), float(abs(st) ** 2)
