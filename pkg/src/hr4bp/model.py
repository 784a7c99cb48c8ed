"""Hill restricted 4-body problem: parameters, Hill variational orbit, and fields.

The Earth-Moon rotating frame is normalized so the mean EM distance is one
length unit and 2*pi time units equal one synodic month.  The frame rotates at
rate (1 + m); the solar forcing is pi-periodic in tau.  All fields reduce to
the Earth-Moon CR3BP when m = 0.
"""

from dataclasses import dataclass, field
import math

import numpy as np

# Forcing frequency and stroboscopic map period: T * omega_S = 2*pi.
OMEGA_S = 2.0
MAP_PERIOD = math.pi

# Synodic period of the EM orbit in years, Sun-Earth-Moon value.
SEM_M = 0.0808
# Earth-Moon mass ratio (not fixed by the model; standard value, configurable).
EM_MU = 0.012150585609624

KM_PER_LU = 384400.0
DAYS_PER_SYNODIC_MONTH = 29.53


@dataclass(frozen=True)
class UnitSet:
    """Conversions between normalized EM units and physical units."""

    km_per_lu: float = KM_PER_LU
    days_per_month: float = DAYS_PER_SYNODIC_MONTH

    @property
    def seconds_per_tu(self) -> float:
        return self.days_per_month * 86400.0 / (2.0 * math.pi)

    @property
    def km_s_per_vu(self) -> float:
        return self.km_per_lu / self.seconds_per_tu

    @property
    def days_per_tu(self) -> float:
        return self.days_per_month / (2.0 * math.pi)

    @property
    def years_per_tu(self) -> float:
        return self.days_per_tu / 365.25


class HillSolveError(RuntimeError):
    """Newton iteration for the Hill variational orbit failed to converge."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


@dataclass(frozen=True)
class HillOrbit:
    """Planar periodic Earth-Moon relative orbit of the Hill problem.

    Stored as normalized coefficients b_n = a_n / m^(2/3) of the complex series
    sum_n b_n exp(i(2n+1) tau) in the Sun-fixed rotating frame, n in
    [-n_max, n_max].  In the EM co-rotating frame the relative position is
    (1 + xi(tau), eta(tau)) with xi even/pi-periodic (cosine series) and eta
    odd/pi-periodic (sine series).
    """

    m: float
    b: np.ndarray  # real coefficients, index k = n + n_max
    residual: float = 0.0

    @property
    def n_max(self) -> int:
        return (len(self.b) - 1) // 2

    @property
    def b0(self) -> float:
        return float(self.b[self.n_max])

    @property
    def a0(self) -> float:
        return self.m ** (2.0 / 3.0) * self.b0

    @property
    def a(self) -> np.ndarray:
        """Unnormalized coefficients a_n(m), n = -n_max..n_max."""
        return self.m ** (2.0 / 3.0) * self.b

    @property
    def grav_coeff(self) -> float:
        """m^2 / a0^3 = 1 / b0^3; equals 1 in the CR3BP limit."""
        return 1.0 / self.b0 ** 3

    def cos_sin_coeffs(self):
        """Coefficients (c_n, s_n), n = 1..n_max, of xi and eta."""
        n0 = self.n_max
        b0 = self.b0
        n = np.arange(1, n0 + 1)
        c = (self.b[n0 + n] + self.b[n0 - n]) / b0
        s = (self.b[n0 + n] - self.b[n0 - n]) / b0
        return c, s

    def xi_eta(self, tau, order: int = 0):
        """Evaluate (xi, eta) or their tau-derivative of given order.

        tau may be a scalar or array; returns arrays broadcast to tau's shape.
        """
        c, s = self.cos_sin_coeffs()
        n = np.arange(1, self.n_max + 1)
        tau = np.asarray(tau, dtype=float)
        ang = 2.0 * np.multiply.outer(tau, n)
        w = (2.0 * n) ** order
        if order % 4 == 0:
            cc, ss = np.cos(ang), np.sin(ang)
        elif order % 4 == 1:
            cc, ss = -np.sin(ang), np.cos(ang)
        elif order % 4 == 2:
            cc, ss = -np.cos(ang), -np.sin(ang)
        else:
            cc, ss = np.sin(ang), -np.cos(ang)
        xi = cc @ (w * c)
        eta = ss @ (w * s)
        return xi, eta


def _hill_residual_coeffs(b, m, n_max, n_grid):
    """Odd-harmonic Fourier coefficients of the Hill equation residual.

    Residual of w'' + 2im w' - (3/2) m^2 (w + conj(w)) + w/|w|^3 on a uniform
    tau grid, projected onto exp(i(2n+1) tau), n = -n_max..n_max.  The
    symmetric (real-b) ansatz makes these coefficients real.
    """
    tau = 2.0 * math.pi * np.arange(n_grid) / n_grid
    k = 2 * np.arange(-n_max, n_max + 1) + 1
    ek = np.exp(1j * np.outer(tau, k))
    w = ek @ b
    dw = ek @ (1j * k * b)
    ddw = ek @ (-(k.astype(float) ** 2) * b)
    r = ddw + 2j * m * dw - 1.5 * m * m * (w + np.conj(w)) + w / np.abs(w) ** 3
    coeffs = np.fft.fft(r) / n_grid
    out = coeffs[np.mod(k, n_grid)]
    return out


# orbits vary smoothly in m, so solves are memoized and warm-started (the
# continuation machinery evaluates thousands of nearby m values)
_HILL_CACHE = {}
_HILL_LAST = {}


def compute_hill_orbit(m: float, n_max: int = 12, n_grid: int = 256,
                       tol: float = 1e-13, max_iter: int = 60) -> HillOrbit:
    """Solve for the Hill variational orbit at parameter m.

    Newton iteration on the normalized Fourier coefficients b_n, seeded from
    the circular (Kepler) limit b_0 = 1 or from the nearest previously solved
    m.  Raises HillSolveError with the residual history on failure.
    """
    if not 0.0 <= m <= 0.1:
        raise ValueError(f"m = {m} outside supported range [0, 0.1]")
    if n_max < 4:
        raise ValueError("n_max must be at least 4")

    key = (round(float(m), 15), int(n_max), int(n_grid))
    hit = _HILL_CACHE.get(key)
    if hit is not None:
        return hit

    b = np.zeros(2 * n_max + 1)
    b[n_max] = 1.0
    if m == 0.0:
        orbit = HillOrbit(m=m, b=b, residual=0.0)
        _HILL_CACHE[key] = orbit
        return orbit
    warm = _HILL_LAST.get(n_max)
    if warm is not None and abs(warm.m - m) < 0.02:
        b = warm.b.copy()

    history = []
    jac = None
    for _ in range(max_iter):
        r = _hill_residual_coeffs(b, m, n_max, n_grid).real
        rnorm = float(np.max(np.abs(r)))
        if history and rnorm > 0.3 * history[-1]:
            jac = None  # chord iteration stalling: refresh the Jacobian
        history.append(rnorm)
        if rnorm < tol:
            orbit = HillOrbit(m=m, b=b, residual=rnorm)
            _HILL_CACHE[key] = orbit
            _HILL_LAST[n_max] = orbit
            return orbit
        if jac is None:
            jac = np.empty((len(b), len(b)))
            h = 1e-7
            for j in range(len(b)):
                bp = b.copy(); bp[j] += h
                bm = b.copy(); bm[j] -= h
                jac[:, j] = (_hill_residual_coeffs(bp, m, n_max, n_grid).real
                             - _hill_residual_coeffs(bm, m, n_max, n_grid).real) / (2 * h)
        b = b - np.linalg.solve(jac, r)

    raise HillSolveError(
        f"Hill orbit Newton did not reach {tol} in {max_iter} iterations "
        f"(last residual {history[-1]:.3e})", history)


def hill_time_domain_residual(orbit: HillOrbit, n_grid: int = 512) -> float:
    """Max pointwise residual of the variational equation on a tau grid."""
    r = _hill_residual_coeffs(orbit.b, orbit.m, orbit.n_max, n_grid)
    # time-domain residual includes the truncation tail beyond n_max
    tau = 2.0 * math.pi * np.arange(n_grid) / n_grid
    k = 2 * np.arange(-orbit.n_max, orbit.n_max + 1) + 1
    ek = np.exp(1j * np.outer(tau, k))
    w = ek @ orbit.b
    dw = ek @ (1j * k * orbit.b)
    ddw = ek @ (-(k.astype(float) ** 2) * orbit.b)
    full = (ddw + 2j * orbit.m * dw - 1.5 * orbit.m ** 2 * (w + np.conj(w))
            + w / np.abs(w) ** 3)
    return float(np.max(np.abs(full)))


@dataclass(frozen=True)
class ModelParams:
    """HR4BP parameters: forcing strength m, mass ratio mu, Hill orbit."""

    m: float = SEM_M
    mu: float = EM_MU
    hill: HillOrbit = None
    n_fourier_max: int = 12
    units: UnitSet = field(default_factory=UnitSet)

    def __post_init__(self):
        if not 0.0 <= self.m <= 0.1:
            raise ValueError(f"m = {self.m} outside supported range")
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mu = {self.mu} outside (0, 1/2)")
        if self.hill is None:
            object.__setattr__(self, "hill",
                               compute_hill_orbit(self.m, self.n_fourier_max))

    @property
    def frame_rate(self) -> float:
        return 1.0 + self.m

    def primaries(self, tau):
        """Earth and Moon positions at epoch tau (each shape (..., 3))."""
        xi, eta = self.hill.xi_eta(tau)
        one = np.ones_like(np.asarray(tau, dtype=float))
        zero = np.zeros_like(one)
        rel = np.stack([(1.0 + xi) * one, eta * one, zero], axis=-1)
        return -self.mu * rel, (1.0 - self.mu) * rel

    def primaries_velocity(self, tau):
        """Synodic-frame velocities of Earth and Moon at tau."""
        dxi, deta = self.hill.xi_eta(tau, order=1)
        one = np.ones_like(np.asarray(tau, dtype=float))
        zero = np.zeros_like(one)
        drel = np.stack([dxi * one, deta * one, zero], axis=-1)
        return -self.mu * drel, (1.0 - self.mu) * drel

    def with_m(self, m: float) -> "ModelParams":
        return ModelParams(m=m, mu=self.mu, hill=None,
                           n_fourier_max=self.n_fourier_max, units=self.units)


@dataclass(frozen=True)
class State:
    """Synodic-frame state: position, velocity, epoch tau."""

    r: np.ndarray
    v: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).copy())
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).copy())
        self.r.setflags(write=False)
        self.v.setflags(write=False)
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.v))):
            raise ValueError("non-finite state components")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])

    @classmethod
    def from_vector(cls, y, tau: float = 0.0) -> "State":
        y = np.asarray(y, dtype=float)
        return cls(r=y[:3], v=y[3:6], tau=tau)


def momenta_from_velocity(y, m: float):
    """Map (r, v) vectors to canonical (r, p); broadcasts over leading axes."""
    y = np.asarray(y, dtype=float)
    out = y.copy()
    w = 1.0 + m
    out[..., 3] = y[..., 3] - w * y[..., 1]
    out[..., 4] = y[..., 4] + w * y[..., 0]
    return out


def velocity_from_momenta(y, m: float):
    """Inverse of momenta_from_velocity."""
    y = np.asarray(y, dtype=float)
    out = y.copy()
    w = 1.0 + m
    out[..., 3] = y[..., 3] + w * y[..., 1]
    out[..., 4] = y[..., 4] - w * y[..., 0]
    return out


class SingularDistanceError(ValueError):
    """State coincides with (or is too close to) a primary."""

    def __init__(self, body: str, distance: float):
        super().__init__(f"singular distance to {body}: {distance:.3e}")
        self.body = body
        self.distance = distance


def _primary_offsets(pos, p: ModelParams, tau):
    earth, moon = p.primaries(tau)
    de = pos - earth
    dm = pos - moon
    r1 = np.sqrt(np.sum(de * de, axis=-1))
    r2 = np.sqrt(np.sum(dm * dm, axis=-1))
    return de, dm, r1, r2


def potential(pos, tau, p: ModelParams, guard: float = 0.0):
    """Effective potential V(x, y, z, tau); broadcasts over leading axes."""
    pos = np.asarray(pos, dtype=float)
    m = p.m
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    de, dm, r1, r2 = _primary_offsets(pos, p, tau)
    if guard > 0.0:
        if np.any(r1 <= guard):
            raise SingularDistanceError("earth", float(np.min(r1)))
        if np.any(r2 <= guard):
            raise SingularDistanceError("moon", float(np.min(r2)))
    amp = 1.0 + 2.0 * m + 1.5 * m * m
    c2, s2 = np.cos(2.0 * tau), np.sin(2.0 * tau)
    quad = (0.5 * amp * (x * x + y * y) - 0.5 * m * m * z * z
            + 0.75 * m * m * ((x * x - y * y) * c2 - 2.0 * x * y * s2))
    g = p.hill.grav_coeff
    return quad + g * ((1.0 - p.mu) / r1 + p.mu / r2)


def potential_gradient(pos, tau, p: ModelParams):
    """Gradient of V with respect to position; broadcasts over leading axes."""
    pos = np.asarray(pos, dtype=float)
    m = p.m
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    de, dm, r1, r2 = _primary_offsets(pos, p, tau)
    if np.any(r1 == 0.0):
        raise SingularDistanceError("earth", 0.0)
    if np.any(r2 == 0.0):
        raise SingularDistanceError("moon", 0.0)
    amp = 1.0 + 2.0 * m + 1.5 * m * m
    c2, s2 = np.cos(2.0 * tau), np.sin(2.0 * tau)
    g = p.hill.grav_coeff
    k1 = g * (1.0 - p.mu) / r1 ** 3
    k2 = g * p.mu / r2 ** 3
    gx = (amp * x + 1.5 * m * m * (x * c2 - y * s2)
          - k1 * de[..., 0] - k2 * dm[..., 0])
    gy = (amp * y + 1.5 * m * m * (-y * c2 - x * s2)
          - k1 * de[..., 1] - k2 * dm[..., 1])
    gz = -m * m * z - k1 * de[..., 2] - k2 * dm[..., 2]
    return np.stack([gx, gy, gz], axis=-1)


def potential_hessian(pos, tau, p: ModelParams):
    """Hessian of V with respect to position, shape (..., 3, 3)."""
    pos = np.asarray(pos, dtype=float)
    m = p.m
    de, dm, r1, r2 = _primary_offsets(pos, p, tau)
    amp = 1.0 + 2.0 * m + 1.5 * m * m
    c2, s2 = np.cos(2.0 * tau), np.sin(2.0 * tau)
    hess = np.zeros(pos.shape[:-1] + (3, 3))
    hess[..., 0, 0] = amp + 1.5 * m * m * c2
    hess[..., 1, 1] = amp - 1.5 * m * m * c2
    hess[..., 0, 1] = hess[..., 1, 0] = -1.5 * m * m * s2
    hess[..., 2, 2] = -m * m
    g = p.hill.grav_coeff
    eye = np.eye(3)
    for d, r, kappa in ((de, r1, (1.0 - p.mu)), (dm, r2, p.mu)):
        r5 = r ** 5
        outer = d[..., :, None] * d[..., None, :]
        hess += g * kappa * (3.0 * outer - (r * r)[..., None, None] * eye) \
            / r5[..., None, None]
    return hess


def eom(s: State, p: ModelParams):
    """Newtonian state derivative (v, a) at the state's epoch."""
    a = acceleration(s.r[None, :], s.v[None, :], s.tau, p)[0]
    return np.concatenate([s.v, a])


def acceleration(pos, vel, tau, p: ModelParams):
    """Acceleration field; pos/vel broadcast over leading axes."""
    grad = potential_gradient(pos, tau, p)
    w = 2.0 * (1.0 + p.m)
    acc = grad.copy()
    acc[..., 0] += w * np.asarray(vel)[..., 1]
    acc[..., 1] -= w * np.asarray(vel)[..., 0]
    return acc


def hamiltonian(s: State, p: ModelParams) -> float:
    """Hamiltonian of the canonical formulation evaluated at the state."""
    return float(hamiltonian_values(s.vector[None, :], s.tau, p)[0])


def hamiltonian_values(y, tau, p: ModelParams):
    """Hamiltonian for stacked (r, v) rows at a common epoch."""
    y = np.asarray(y, dtype=float)
    can = momenta_from_velocity(y, p.m)
    x, yy = can[..., 0], can[..., 1]
    px, py, pz = can[..., 3], can[..., 4], can[..., 5]
    w = 1.0 + p.m
    kin = 0.5 * (px * px + py * py + pz * pz)
    rot = 0.5 * w * w * (x * x + yy * yy) + w * (yy * px - x * py)
    return kin + rot - potential(y[..., :3], tau, p)


def apply_symmetry(s: State, which: str) -> State:
    """Discrete symmetry S_y (with tau -> -tau) or S_z of the flow."""
    if which == "sz":
        return State(r=s.r * np.array([1.0, 1.0, -1.0]),
                     v=s.v * np.array([1.0, 1.0, -1.0]), tau=s.tau)
    if which == "sy":
        return State(r=s.r * np.array([1.0, -1.0, 1.0]),
                     v=s.v * np.array([-1.0, 1.0, -1.0]), tau=-s.tau)
    raise ValueError(f"unknown symmetry {which!r}; expected 'sy' or 'sz'")


def l4_state(p: ModelParams) -> State:
    """CR3BP L4 point (at rest) as a seed state."""
    return State(r=np.array([0.5 - p.mu, math.sqrt(3.0) / 2.0, 0.0]),
                 v=np.zeros(3), tau=0.0)


def l5_state(p: ModelParams) -> State:
    return State(r=np.array([0.5 - p.mu, -math.sqrt(3.0) / 2.0, 0.0]),
                 v=np.zeros(3), tau=0.0)


def parse_config(text: str) -> dict:
    """Parse a plain key=value config; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


_MODEL_KEYS = {"m": float, "mu": float, "n_fourier_max": int}


def params_from_config(cfg: dict) -> ModelParams:
    """Build ModelParams from a parsed config; unknown model keys rejected."""
    kwargs = {}
    for key, value in cfg.items():
        if key not in _MODEL_KEYS:
            raise ValueError(f"unknown model config key {key!r}")
        kwargs[key] = _MODEL_KEYS[key](value)
    return ModelParams(**kwargs)


def hill_coefficients_csv(orbit: HillOrbit) -> str:
    """CSV dump of the unnormalized coefficients, columns n,a_n."""
    lines = ["n,a_n"]
    a = orbit.a
    for i, n in enumerate(range(-orbit.n_max, orbit.n_max + 1)):
        lines.append(f"{n},{a[i]:.16e}")
    return "\n".join(lines) + "\n"
