"""Periodic orbits of the stroboscopic map: correction, continuation, Melnikov.

Covers the dynamical equivalent of L4 (pi-periodic), the 2:1 resonant branches
(2*pi-periodic), monodromy stability, pseudo-arclength continuation in the
forcing parameter m, and the subharmonic Melnikov analysis that selects which
points of the CR3BP 2*pi orbit persist under the solar forcing.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from hr4bp.model import (
    MAP_PERIOD,
    ModelParams,
    State,
    acceleration,
    l4_state,
    potential_hessian,
)
from hr4bp.propagation import (
    PropagationError,
    flow,
    flow_states_with_stm,
    propagate_dense,
    symplectic_defect,
)

PLANAR = (0, 1, 3, 4)


class CorrectionError(RuntimeError):
    """Newton correction failed; carries the residual history."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


@dataclass
class PeriodicOrbit:
    """Fixed point of the k*pi stroboscopic map with stability data."""

    s0: State
    k: int
    m: float
    monodromy: np.ndarray
    eigenvalues: np.ndarray
    residual: float
    label: str = ""

    @property
    def period(self) -> float:
        return self.k * MAP_PERIOD

    def is_planar(self, tol: float = 1e-12) -> bool:
        return abs(self.s0.r[2]) < tol and abs(self.s0.v[2]) < tol


@dataclass
class StabilityClass:
    """Reciprocal eigenvalue pairs partitioned into center/saddle/unity."""

    pairs: list          # list of (lambda, lambda') tuples
    labels: list         # 'center' | 'saddle' | 'unity' | 'marginal'
    frequencies: list    # |arg(lambda)| / period for center pairs, else None

    @property
    def summary(self) -> str:
        order = {"saddle": 0, "center": 1, "unity": 2, "marginal": 3}
        shown = [l for l in self.labels if l != "unity"]
        shown.sort(key=lambda l: order.get(l, 9))
        return " x ".join(shown) if shown else "degenerate"

    @property
    def is_elliptic(self) -> bool:
        return all(l in ("center", "unity") for l in self.labels)

    @property
    def is_partially_hyperbolic(self) -> bool:
        return any(l == "saddle" for l in self.labels) and \
            any(l == "center" for l in self.labels)


def field_vector(y, p: ModelParams, tau: float = 0.0):
    acc = acceleration(y[None, :3], y[None, 3:6], tau, p)[0]
    return np.concatenate([y[3:6], acc])


def linearized_field_matrix(y, p: ModelParams, tau: float = 0.0):
    """Jacobian of the first-order field at a state (6x6)."""
    a = np.zeros((6, 6))
    a[:3, 3:] = np.eye(3)
    a[3:, :3] = potential_hessian(y[None, :3], tau, p)[0]
    w = 2.0 * (1.0 + p.m)
    a[3, 4] = w
    a[4, 3] = -w
    return a


def _map_residual(y, k, p, tol):
    yf, phi = flow_states_with_stm(y[None, :], 0.0, k * MAP_PERIOD, p, tol=tol)
    return yf[0] - y, phi[0]


def correct_periodic(seed: State, k: int, p: ModelParams, tol: float = 1e-10,
                     max_iter: int = 25, flow_tol: float = 1e-12,
                     step_cap: float = 0.1, label: str = "") -> PeriodicOrbit:
    """Correct a fixed point of the k*pi stroboscopic map by Newton iteration.

    The square system is used when (Phi - I) is safely invertible; near the
    autonomous limit (exact unity pair) a least-squares step with a phase
    anchor along the flow direction removes the time-shift degeneracy.
    Updates are capped in norm to tame overshoot through near-unity pairs.
    """
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    y = seed.vector
    history = []
    res, phi = _map_residual(y, k, p, flow_tol)
    for it in range(max_iter):
        rn = float(np.linalg.norm(res))
        history.append(rn)
        if rn < tol:
            eigs = np.linalg.eigvals(phi)
            return PeriodicOrbit(s0=State.from_vector(y, 0.0), k=k, m=p.m,
                                 monodromy=phi, eigenvalues=eigs,
                                 residual=rn, label=label)
        jac = phi - np.eye(6)
        if np.linalg.cond(jac) < 1e10:
            dy = np.linalg.solve(jac, -res)
        else:
            fref = field_vector(y, p)
            bord = np.vstack([jac, fref])
            rhs = np.concatenate([-res, [0.0]])
            dy = np.linalg.lstsq(bord, rhs, rcond=None)[0]
        ndy = np.linalg.norm(dy)
        if ndy > step_cap:
            dy *= step_cap / ndy
        y = y + dy
        try:
            res, phi = _map_residual(y, k, p, flow_tol)
        except PropagationError as exc:
            raise CorrectionError(f"propagation failed mid-correction: {exc}",
                                  history) from exc
        if np.linalg.norm(res) > 1e3:
            raise CorrectionError("Newton divergence", history)
    raise CorrectionError(
        f"Newton did not reach {tol} in {max_iter} iterations "
        f"(last residual {history[-1]:.3e})", history)


def pair_eigenvalues(eigs, pair_tol: float = 1e-6):
    """Group six symplectic-map eigenvalues into three reciprocal pairs."""
    remaining = list(eigs)
    pairs = []
    while remaining:
        lam = remaining.pop(0)
        recip = np.conj(lam) / abs(lam) ** 2
        jbest = int(np.argmin([abs(o - recip) for o in remaining]))
        pairs.append((lam, remaining.pop(jbest)))
    for lam, other in pairs:
        if abs(lam * other - 1.0) > math.sqrt(pair_tol):
            pass  # tolerated; classification marks marginal cases
    return pairs


def classify_stability(orbit: PeriodicOrbit, unit_tol: float = 1e-4,
                       unity_tol: float = 1e-5) -> StabilityClass:
    """Partition the monodromy spectrum into center/saddle/unity pairs."""
    pairs = pair_eigenvalues(orbit.eigenvalues)
    labels = []
    freqs = []
    for lam, other in pairs:
        if abs(lam - 1.0) < unity_tol and abs(other - 1.0) < unity_tol:
            labels.append("unity")
            freqs.append(None)
            continue
        unit_dist = abs(abs(lam) - 1.0)
        if unit_dist < unit_tol:
            labels.append("center")
            freqs.append(abs(np.angle(lam)) / orbit.period)
        elif abs(lam.imag) < unit_tol * abs(lam):
            labels.append("saddle")
            freqs.append(None)
        else:
            labels.append("marginal")
            freqs.append(None)
    return StabilityClass(pairs=pairs, labels=labels, frequencies=freqs)


def cr3bp_l4_linear_modes(p: ModelParams):
    """Eigenvalues of the CR3BP field linearized at L4 (pure imaginary)."""
    if p.m != 0.0:
        raise ValueError("linear modes at L4 are a CR3BP (m = 0) quantity")
    a = linearized_field_matrix(l4_state(p).vector, p)
    return np.linalg.eigvals(a)


# --- CR3BP 2*pi member of the L4 short-period family ------------------------

def _planar_embed(z4):
    y = np.zeros(6)
    y[[0, 1]] = z4[:2]
    y[[3, 4]] = z4[2:]
    return y


def _correct_free_period_planar(y6, T, p, flow_tol=1e-12, itmax=30):
    """Shooting with free period and a phase anchor, planar subsystem."""
    z = np.concatenate([y6[list(PLANAR)], [T]])
    ref = z[:4].copy()
    fref = field_vector(_planar_embed(ref), p)[list(PLANAR)]
    res = np.full(4, np.inf)
    for _ in range(itmax):
        y = _planar_embed(z[:4])
        yf, phi = flow_states_with_stm(y[None, :], 0.0, z[4], p, tol=flow_tol)
        res = (yf[0] - y)[list(PLANAR)]
        if np.linalg.norm(res) < 1e-12:
            break
        ft = field_vector(yf[0], p)[list(PLANAR)]
        jac = np.zeros((5, 5))
        jac[:4, :4] = phi[0][np.ix_(PLANAR, PLANAR)] - np.eye(4)
        jac[:4, 4] = ft
        jac[4, :4] = fref
        rhs = np.concatenate([-res, [-(fref @ (z[:4] - ref))]])
        dz = np.linalg.lstsq(jac, rhs, rcond=None)[0]
        z = z + dz
    return _planar_embed(z[:4]), z[4], float(np.linalg.norm(res))


def cr3bp_l4_short_period_orbit(p: ModelParams, flow_tol: float = 1e-12,
                                ds: float = 0.02) -> PeriodicOrbit:
    """CR3BP short-period family member with period exactly 2*pi.

    Marches the family by planar pseudo-arclength from the linearized mode
    (frequency 0.9545 at EM mass ratio) until the period crosses 2*pi, then
    corrects at fixed period on the doubled stroboscopic map.
    """
    if p.m != 0.0:
        raise ValueError("short-period family lives in the CR3BP (m = 0)")
    yl4 = l4_state(p).vector
    a = linearized_field_matrix(yl4, p)
    ev, vec = np.linalg.eig(a)
    # short-period mode: largest in-plane imaginary frequency below 1
    cand = [i for i in range(6) if ev[i].imag > 0.1
            and abs(vec[2, i]) + abs(vec[5, i]) < 1e-9 and ev[i].imag < 0.9999]
    i_sp = cand[int(np.argmax([ev[i].imag for i in cand]))]
    freq0 = ev[i_sp].imag
    v = np.real(vec[:, i_sp])
    v = v / np.linalg.norm(v)

    # first member at small amplitude, free period
    amp0 = 0.01
    y0, T, _ = _correct_free_period_planar(yl4 + amp0 * v, 2 * math.pi / freq0,
                                           p, flow_tol)
    z = np.concatenate([y0[list(PLANAR)], [T]])
    tang = np.zeros(5)
    tang[:4] = v[list(PLANAR)] / np.linalg.norm(v[list(PLANAR)])
    hist = [z]
    step = ds
    while hist[-1][4] > 2 * math.pi:
        if len(hist) >= 2:
            tang = hist[-1] - hist[-2]
            tang /= np.linalg.norm(tang)
        zg = hist[-1] + step * tang
        z, ok = _arc_correct_planar_fixed_m(zg, hist[-1], tang, step, p,
                                            flow_tol)
        if not ok:
            step *= 0.5
            if step < 1e-8:
                raise CorrectionError(
                    f"family march stalled at period {hist[-1][4]:.6f} "
                    f"(target 2*pi); reached periods "
                    f"[{hist[0][4]:.6f}, {hist[-1][4]:.6f}]")
            continue
        hist.append(z)
        step = min(step * 1.3, 0.1)

    z1, z2 = hist[-2], hist[-1]
    w = (2 * math.pi - z1[4]) / (z2[4] - z1[4])
    yg = _planar_embed((z1 + w * (z2 - z1))[:4])
    orbit = correct_periodic(State.from_vector(yg, 0.0), 2, p,
                             flow_tol=flow_tol, label="cr3bp-2pi")
    return orbit


def _arc_correct_planar_fixed_m(z, zprev, tang, ds, p, flow_tol, itmax=14):
    """One pseudo-arclength corrector step for (x, y, vx, vy, T) at fixed m."""
    fref = field_vector(_planar_embed(zprev[:4]), p)[list(PLANAR)]
    rn = np.inf
    for _ in range(itmax):
        y = _planar_embed(z[:4])
        try:
            yf, phi = flow_states_with_stm(y[None, :], 0.0, z[4], p,
                                           tol=flow_tol)
        except PropagationError:
            return z, False
        res = (yf[0] - y)[list(PLANAR)]
        c_phase = fref @ (z[:4] - zprev[:4])
        c_arc = tang @ (z - zprev) - ds
        full = np.concatenate([res, [c_phase, c_arc]])
        rn = np.linalg.norm(full)
        if rn < 1e-11:
            return z, True
        ft = field_vector(yf[0], p)[list(PLANAR)]
        jac = np.zeros((6, 5))
        jac[:4, :4] = phi[0][np.ix_(PLANAR, PLANAR)] - np.eye(4)
        jac[:4, 4] = ft
        jac[4, :4] = fref
        jac[5, :] = tang
        dz = np.linalg.lstsq(jac, -full, rcond=None)[0]
        nd = np.linalg.norm(dz)
        if nd > 0.2:
            dz *= 0.2 / nd
        z = z + dz
    return z, rn < 1e-9


# --- Melnikov analysis -------------------------------------------------------

@dataclass
class MelnikovProfile:
    """Melnikov function sampled along the unperturbed 2*pi orbit."""

    s_grid: np.ndarray
    values: np.ndarray
    tau0: float
    zeros: np.ndarray
    slopes: np.ndarray

    def zero_pairs(self):
        """Indices (i, j) with zero_j = zero_i + pi (same orbit, phase shift)."""
        pairs = []
        for i, si in enumerate(self.zeros):
            for j, sj in enumerate(self.zeros):
                if j > i and abs(((sj - si) - math.pi + math.pi)
                                 % (2 * math.pi) - math.pi) < 1e-6:
                    pairs.append((i, j))
        return pairs


def _perturbation_dot_velocity(samples, mu):
    """Per-sample building blocks of the second-order forcing work rate.

    Returns (Fc, Fs) with integrand = cos(2a) Fc + sin(2a) Fs at each orbit
    sample, a = tau0 + tau.
    """
    r = samples[:, :3]
    v = samples[:, 3:]
    r1 = r - np.array([-mu, 0.0, 0.0])
    r2 = r - np.array([1.0 - mu, 0.0, 0.0])
    n1 = np.linalg.norm(r1, axis=1)
    n2 = np.linalg.norm(r2, axis=1)
    pmat = ((1.0 - mu) / n1 ** 3 - mu / n2 ** 3)[:, None, None] * np.eye(3) \
        - 3.0 * r1[:, :, None] * r1[:, None, :] / n1[:, None, None] ** 5 \
        + 3.0 * r2[:, :, None] * r2[:, None, :] / n2[:, None, None] ** 5
    vp = np.einsum("ni,nij->nj", v, pmat)
    a1 = v[:, 1] * r[:, 1] - v[:, 0] * r[:, 0]
    a2 = v[:, 0] * r[:, 1] + v[:, 1] * r[:, 0]
    cfac = mu * (1.0 - mu)
    fc = -1.5 * a1 + cfac * vp[:, 0]
    fs = -1.5 * a2 - (11.0 / 8.0) * cfac * vp[:, 1]
    # vertical part of the rotation term: -(3/2)(-2/3) vz z = vz z
    fconst = v[:, 2] * r[:, 2]
    return fc, fs, fconst


def melnikov_2to1(orbit: PeriodicOrbit, p: ModelParams, tau0: float = 0.0,
                  n_s: int = 1024) -> MelnikovProfile:
    """Subharmonic Melnikov function along a CR3BP 2*pi-periodic orbit.

    Quadrature uses the uniform-grid trapezoid rule, spectrally accurate for
    the periodic integrand; the phase grid doubles as quadrature grid so the
    integral reduces to circular correlations of per-sample quantities.
    """
    if orbit.k != 2 or p.m != 0.0:
        raise ValueError("expected a CR3BP (m = 0) orbit of period 2*pi")
    if orbit.residual > 1e-8:
        raise ValueError(f"orbit residual {orbit.residual:.2e} too large "
                         "for Melnikov quadrature")
    if n_s < 256:
        raise ValueError("need at least 256 quadrature nodes")
    traj = propagate_dense(orbit.s0, 2 * math.pi, p, tol=1e-13)
    us = 2 * math.pi * np.arange(n_s) / n_s
    samples = np.stack([traj.state_at(u) for u in us])
    fc, fs, fconst = _perturbation_dot_velocity(samples, p.mu)

    ang = 2.0 * (tau0 + us)
    cq = np.cos(ang)
    sq = np.sin(ang)
    w = 2.0 * math.pi / n_s
    # M(s_j) = sum_q w [cq(q) Fc(j+q) + sq(q) Fs(j+q) + Fconst(j+q)]
    # circular correlation via FFT: sum_q g(q) f(j+q) = IFFT(conj(G) * F)
    fc_hat = np.fft.fft(fc)
    fs_hat = np.fft.fft(fs)
    cq_hat = np.fft.fft(cq)
    sq_hat = np.fft.fft(sq)
    corr = np.fft.ifft(np.conj(cq_hat) * fc_hat + np.conj(sq_hat) * fs_hat).real
    mvals = w * (corr + np.sum(fconst))
    sgn = np.sign(mvals)
    flips = np.where(sgn != np.roll(sgn, -1))[0]
    zeros = []
    slopes = []
    coeffs = np.fft.fft(mvals) / n_s
    kfreq = np.fft.fftfreq(n_s, d=1.0 / n_s)

    def m_interp(s):
        return float(np.real(np.sum(coeffs * np.exp(1j * kfreq * s))))

    from scipy.optimize import brentq
    for j in flips:
        a, b = us[j], us[j] + w
        try:
            root = brentq(m_interp, a, b, xtol=1e-13)
        except ValueError:
            continue
        zeros.append(root % (2 * math.pi))
        # five-point finite-difference slope
        h = w
        st = [m_interp(root + i * h) for i in (-2, -1, 1, 2)]
        slopes.append((st[0] - 8 * st[1] + 8 * st[2] - st[3]) / (12 * h))
    order = np.argsort(zeros)
    return MelnikovProfile(s_grid=us, values=mvals, tau0=tau0,
                           zeros=np.array(zeros)[order],
                           slopes=np.array(slopes)[order])


# --- Multiple-shooting correction and continuation in m ----------------------

def _ms_propagate(nodes, T, p, flow_tol):
    """Propagate each node over T/n; returns (end states, segment STMs)."""
    n = nodes.shape[0]
    return flow_states_with_stm(nodes, 0.0, T / n, p, tol=flow_tol)


def _ms_segment_starts(nodes, T):
    return np.arange(nodes.shape[0]) * T / nodes.shape[0]


def _ms_flow_segments(nodes, T, p, flow_tol):
    """Endpoint of each segment, propagated from its own epoch."""
    n = nodes.shape[0]
    dt = T / n
    outs = np.empty_like(nodes)
    stms = np.empty((n, 6, 6))
    for j in range(n):
        yf, phi = flow_states_with_stm(nodes[j][None, :], j * dt, dt, p,
                                       tol=flow_tol)
        outs[j] = yf[0]
        stms[j] = phi[0]
    return outs, stms


def _ms_residual_planar(nodes, T, p, flow_tol):
    outs, stms = _ms_flow_segments(nodes, T, p, flow_tol)
    n = nodes.shape[0]
    pl = list(PLANAR)
    res = np.empty((n, 4))
    for j in range(n):
        res[j] = (outs[j] - nodes[(j + 1) % n])[pl]
    return res, stms, outs


def _levenberg_solve(eval_fn, x0, tol, max_iter=80, mu0=1e-10):
    """Damped Gauss-Newton on a square/overdetermined root problem.

    eval_fn(x) -> (residual, jacobian, payload); the damping handles the
    strongly non-normal shooting Jacobians of large resonant orbits, where
    plain Newton steps blow up along near-singular directions.  Returns
    (x, residual_norm, payload, history).
    """
    x = np.asarray(x0, dtype=float).copy()
    res, jac, payload = eval_fn(x)
    rn = float(np.linalg.norm(res))
    history = [rn]
    mu = mu0
    for _ in range(max_iter):
        if rn < tol:
            return x, rn, payload, history
        jtj = jac.T @ jac
        jtr = jac.T @ res
        dscale = np.diag(jtj).copy()
        dscale[dscale <= 0] = 1.0
        accepted = False
        for _ in range(25):
            try:
                dz = np.linalg.solve(jtj + mu * np.diag(dscale), -jtr)
            except np.linalg.LinAlgError:
                mu = max(mu * 10.0, 1e-12)
                continue
            try:
                rest, jact, payt = eval_fn(x + dz)
            except PropagationError:
                mu = max(mu * 10.0, 1e-12)
                continue
            rnt = float(np.linalg.norm(rest))
            if rnt < rn:
                x = x + dz
                res, jac, payload, rn = rest, jact, payt, rnt
                history.append(rn)
                mu = max(mu / 5.0, 1e-14)
                accepted = True
                break
            mu = max(mu * 10.0, 1e-12)
        if not accepted:
            break
    return x, rn, payload, history


def correct_periodic_ms(node_seed, k: int, p: ModelParams, tol: float = 1e-10,
                        max_iter: int = 80, flow_tol: float = 1e-12,
                        label: str = "") -> PeriodicOrbit:
    """Multiple-shooting correction of a planar k*pi-periodic orbit.

    node_seed has shape (n_seg, 6) with nodes at epochs j*T/n_seg.  Segment
    STMs keep the linear algebra conditioned for orbits whose full-period map
    is too stiff for single shooting; Levenberg damping controls the
    near-degenerate phase direction at small m.  Monodromy is the ordered
    product of the segment STMs.
    """
    nodes0 = np.array(node_seed, dtype=float)
    n = nodes0.shape[0]
    T = k * MAP_PERIOD
    pl = list(PLANAR)

    def unpack(x):
        nodes = nodes0.copy()
        nodes[:, pl] = x.reshape(n, 4)
        return nodes

    def eval_fn(x):
        nodes = unpack(x)
        res, stms, _ = _ms_residual_planar(nodes, T, p, flow_tol)
        jac = np.zeros((4 * n, 4 * n))
        for j in range(n):
            jac[4 * j:4 * j + 4, 4 * j:4 * j + 4] = stms[j][np.ix_(pl, pl)]
            jnext = (j + 1) % n
            jac[4 * j:4 * j + 4, 4 * jnext:4 * jnext + 4] -= np.eye(4)
        return res.ravel(), jac, stms

    x, rn, stms, history = _levenberg_solve(
        eval_fn, nodes0[:, pl].ravel(), tol, max_iter=max_iter)
    if rn >= tol:
        raise CorrectionError(
            f"multiple-shooting correction did not reach {tol} "
            f"(last residual {rn:.3e})", history)
    nodes = unpack(x)
    mono = np.eye(6)
    for j in range(n):
        mono = stms[j] @ mono
    eigs = np.linalg.eigvals(mono)
    return PeriodicOrbit(s0=State.from_vector(nodes[0], 0.0), k=k, m=p.m,
                         monodromy=mono, eigenvalues=eigs, residual=rn,
                         label=label)


def melnikov_seed_nodes(orbit_2pi: PeriodicOrbit, s_zero: float,
                        p0: ModelParams, n_seg: int = 8):
    """Node states along the CR3BP orbit starting at phase s_zero."""
    nodes = np.empty((n_seg, 6))
    dt = 2.0 * MAP_PERIOD / n_seg
    for j in range(n_seg):
        nodes[j] = flow(orbit_2pi.s0, float(s_zero) + j * dt, p0,
                        tol=1e-13).vector
    return nodes


@dataclass
class BranchPoint:
    m: float
    orbit: PeriodicOrbit


@dataclass
class BranchDiagram:
    """One family of stroboscopic fixed points continued in m."""

    label: str
    k: int
    points: list = field(default_factory=list)
    events: list = field(default_factory=list)
    termination: str = ""

    @property
    def m_values(self):
        return np.array([bp.m for bp in self.points])

    @property
    def m_max(self) -> float:
        return float(self.m_values.max()) if self.points else math.nan

    def reached(self, m_target: float, tol: float = 1e-9) -> bool:
        return bool(self.points) and self.m_max >= m_target - tol

    def to_csv(self) -> str:
        header = ("m,x0,y0,z0,vx0,vy0,vz0,k,"
                  + ",".join(f"re_l{i+1},im_l{i+1}" for i in range(6)))
        lines = [header]
        for bp in self.points:
            eigs = sorted(bp.orbit.eigenvalues,
                          key=lambda z: (-abs(z.imag), -z.real))
            vals = [bp.m, *bp.orbit.s0.vector, bp.orbit.k]
            for lam in eigs:
                vals.extend([lam.real, lam.imag])
            lines.append(",".join(f"{val:.16e}" if isinstance(val, float)
                                  else str(val) for val in vals))
        return "\n".join(lines) + "\n"


def _params_cached(cache, m, mu, nmax=12):
    key = round(m, 14)
    if key not in cache:
        cache[key] = ModelParams(m=m, mu=mu, n_fourier_max=nmax)
    return cache[key]


def _sample_orbit_nodes(orbit: PeriodicOrbit, p: ModelParams, n_seg: int):
    nodes = np.empty((n_seg, 6))
    nodes[0] = orbit.s0.vector
    dt = orbit.period / n_seg
    for j in range(1, n_seg):
        nodes[j] = flow(State.from_vector(nodes[j - 1], (j - 1) * dt), dt, p,
                        tol=1e-13).vector
    return nodes


def continue_in_m(branch_seed: PeriodicOrbit, m_target: float, mu: float,
                  n_seg: int = 8, ds0: float = 2e-3, ds_max: float = 2e-2,
                  ds_floor: float = 1e-9, max_points: int = 3000,
                  flow_tol: float = 1e-12, m_floor: float = None,
                  label: str = "") -> BranchDiagram:
    """Pseudo-arclength continuation of a planar stroboscopic orbit in m.

    Multiple shooting keeps the corrector conditioned on large resonant
    orbits.  The branch ends when m_target is reached, when it folds back to
    small m (recorded as a fold event; the signature of the branch dying in a
    collision), or at the step floor.
    """
    if not branch_seed.is_planar():
        raise NotImplementedError("continuation implemented for planar "
                                  "branches (the L4 resonant orbits)")
    k = branch_seed.k
    T = k * MAP_PERIOD
    cache = {}
    pl = list(PLANAR)
    p_seed = _params_cached(cache, branch_seed.m, mu)
    nodes = _sample_orbit_nodes(branch_seed, p_seed, n_seg)
    nz = 4 * n_seg

    def pack(nodes, m):
        return np.concatenate([nodes[:, pl].ravel(), [m]])

    def unpack(z):
        nodes = np.zeros((n_seg, 6))
        nodes[:, pl] = z[:nz].reshape(n_seg, 4)
        return nodes, z[nz]

    diagram = BranchDiagram(label=label or branch_seed.label, k=k)
    diagram.points.append(BranchPoint(m=branch_seed.m, orbit=branch_seed))
    hist = [pack(nodes, branch_seed.m)]
    tang = np.zeros(nz + 1)
    tang[nz] = 1.0
    ds = ds0
    if m_floor is None:
        m_floor = max(1e-3, branch_seed.m * 0.5)
    rising = True
    while len(diagram.points) < max_points:
        z = hist[-1] + ds * tang
        z, stms, ok = _ms_arc_correct(z, hist[-1], tang, ds, k, n_seg, cache,
                                      mu, flow_tol, unpack)
        if not ok or np.linalg.norm(z[:nz] - hist[-1][:nz]) > \
                40 * max(ds, 1e-4):
            ds *= 0.5
            if ds < ds_floor:
                diagram.termination = "step_floor"
                break
            continue
        hist.append(z.copy())
        newt = z - hist[-2]
        nn = np.linalg.norm(newt)
        if nn > 0:
            tang = newt / nn
        ds = min(ds * 1.3, ds_max)
        nodes, m = unpack(z)
        mono = np.eye(6)
        for j in range(n_seg):
            mono = stms[j] @ mono
        eigs = np.linalg.eigvals(mono)
        orbit = PeriodicOrbit(s0=State.from_vector(nodes[0], 0.0), k=k, m=m,
                              monodromy=mono, eigenvalues=eigs,
                              residual=0.0, label=diagram.label)
        diagram.points.append(BranchPoint(m=m, orbit=orbit))
        if rising and tang[nz] < 0.0:
            rising = False
            diagram.events.append(("fold_in_m", m))
        if m >= m_target - 1e-10:
            diagram.termination = "reached_target"
            break
        if m <= m_floor:
            diagram.termination = "folded_to_small_m"
            break
    else:
        diagram.termination = "max_points"
    return diagram


def _ms_arc_correct(z, zprev, tang, ds, k, n_seg, cache, mu, flow_tol,
                    unpack, itmax=20):
    T = k * MAP_PERIOD
    pl = list(PLANAR)
    nz = 4 * n_seg
    stms = None
    rn = np.inf
    for _ in range(itmax):
        nodes, m = unpack(z)
        if not (5e-4 < m < 0.0988):
            return z, stms, False
        p = _params_cached(cache, m, mu)
        try:
            res, stms, outs = _ms_residual_planar(nodes, T, p, flow_tol)
        except PropagationError:
            return z, stms, False
        c_arc = tang @ (z - zprev) - ds
        full = np.concatenate([res.ravel(), [c_arc]])
        rn = np.linalg.norm(full)
        if rn < 5e-10:
            return z, stms, True
        dm = 3e-6
        pa = _params_cached(cache, m + dm, mu)
        try:
            mcol = np.empty((n_seg, 4))
            dt = T / n_seg
            for j in range(n_seg):
                ya = flow(State.from_vector(nodes[j], j * dt), dt, pa,
                          tol=flow_tol).vector
                mcol[j] = (ya - outs[j])[pl] / dm
        except PropagationError:
            return z, stms, False
        jac = np.zeros((nz + 1, nz + 1))
        for j in range(n_seg):
            jac[4 * j:4 * j + 4, 4 * j:4 * j + 4] = stms[j][np.ix_(pl, pl)]
            jnext = (j + 1) % n_seg
            jac[4 * j:4 * j + 4, 4 * jnext:4 * jnext + 4] -= np.eye(4)
            jac[4 * j:4 * j + 4, nz] = mcol[j]
        jac[nz, :] = tang
        try:
            dz = np.linalg.solve(jac, -full)
        except np.linalg.LinAlgError:
            return z, stms, False
        nd = np.linalg.norm(dz)
        cap = 0.1 * math.sqrt(n_seg)
        if nd > cap:
            dz *= cap / nd
        z = z + dz
    return z, stms, rn < 1e-8


def correct_melnikov_seed(orbit_2pi: PeriodicOrbit, s_zero: float,
                          m_start: float, p0: ModelParams, n_seg: int = 8,
                          flow_tol: float = 1e-12,
                          label: str = "") -> PeriodicOrbit:
    """Correct the HR4BP k=2 orbit continued from a Melnikov zero at small m.

    The orbit deforms at O(m) while the phase selection only enters at
    O(m^2), which leaves plain Newton with a long curved valley along the
    near-degenerate phase direction; the Levenberg-damped multiple-shooting
    correction follows the valley reliably.
    """
    nodes0 = melnikov_seed_nodes(orbit_2pi, s_zero, p0, n_seg)
    p = ModelParams(m=m_start, mu=p0.mu)
    orbit = correct_periodic_ms(nodes0, 2, p, flow_tol=flow_tol, label=label)
    drift = np.linalg.norm(orbit.s0.vector - nodes0[0])
    if drift > 0.5:
        raise CorrectionError(
            f"Melnikov seed at s = {s_zero:.4f} drifted {drift:.2f} "
            "(wrong basin)")
    return orbit
