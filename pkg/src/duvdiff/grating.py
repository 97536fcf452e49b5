"""Momentum-transfer physics at the standing-wave grating.

A molecule crossing the grating accumulates an eikonal phase from the dipole
potential and may coherently absorb photons, each adding +-hbar*k_L of
transverse momentum.  The transmitted state splits into channels labelled by
the absorbed-photon count m; the Fourier coefficients of each channel's
transmission function give the probabilities of discrete momentum orders
j*hbar*k_L.  Fluoresced photons add an isotropic recoil that smears the
orders; depletion removes molecules after absorption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.constants import c as c_light, epsilon_0, h as h_planck, hbar

from .config import GratingSpec, MoleculeSpec
from .errors import NumericsError, TruncationError

_PHI_PREFACTOR = math.sqrt(8.0 / math.pi)
_N_PREFACTOR = 8.0 / math.sqrt(2.0 * math.pi)

_M_HARD_LIMIT = 512


@dataclass(frozen=True)
class GratingStrength:
    """Peak eikonal phase and mean absorbed photon number at an antinode.

    For mirror reflectivity below one, phi0 and n0 are the x-modulated
    parts (scaled by the modulation contrast) and n_uniform is the
    unmodulated running-wave absorption, which only attenuates.
    """

    phi0: float
    n0: float
    n_uniform: float = 0.0


@dataclass(frozen=True)
class Channel:
    """One absorption channel: m photons absorbed, Fourier amplitudes c_{m,j}."""

    m: int
    coeffs: np.ndarray  # complex, orders j = -j_max .. j_max
    mass: float         # sum_j |c_{m,j}|^2


@dataclass(frozen=True)
class ChannelSet:
    channels: list[Channel]
    m_max: int
    j_max: int
    epsilon_trunc: float
    residual_mass: float
    strength: GratingStrength

    @property
    def orders(self) -> np.ndarray:
        return np.arange(-self.j_max, self.j_max + 1)


@dataclass(frozen=True)
class KickDistribution:
    """Transverse momentum-transfer distribution behind the grating."""

    orders: np.ndarray                       # j values
    discrete: np.ndarray                     # probability of kick j*hbar*k_L
    smear: list[tuple[int, int, float]]      # (base order j, f, probability)
    survival: float


def modulation_contrast(reflectivity: float) -> float:
    """Amplitude of the cos^2-modulated intensity component for mirror
    reflectivity eta, relative to a perfect mirror.

    The intensity 1 + eta + 2*sqrt(eta)*cos(2 k x) splits into
    4*sqrt(eta)*cos^2(k x) plus the uniform remainder (1 - sqrt(eta))^2;
    the modulated share is sqrt(eta) of the eta=1 antinode value.
    """
    return math.sqrt(reflectivity)


def grating_strength(mol: MoleculeSpec, grat: GratingSpec,
                     v_z: float, y: float) -> GratingStrength:
    """Evaluate phi0 and n0 for forward velocity v_z at vertical offset y.

    Peak values follow from an incident Gaussian beam of power P and round
    waist w (antinode intensity 4x the incident peak at full reflectivity)
    crossed at speed v_z, so the transit integral contributes (w/v)*sqrt(pi/2).
    """
    if v_z <= 0:
        raise NumericsError(f"forward velocity must be positive, got {v_z}")
    envelope = math.exp(-2.0 * (y - grat.height) ** 2 / grat.waist_y ** 2)
    phi_base = (_PHI_PREFACTOR * mol.alpha_duv * grat.power
                / (hbar * epsilon_0 * c_light * grat.waist_y * v_z)) * envelope
    n_base = (_N_PREFACTOR * mol.sigma_duv * grat.power * grat.lambda_l
              / (h_planck * c_light * grat.waist_y * v_z)) * envelope
    contrast = modulation_contrast(grat.reflectivity)
    # The uniform intensity remainder (1 - sqrt(eta))^2 / 4 of the antinode
    # value attenuates without diffracting; its dipole-phase contribution is
    # a global phase with no observable effect.
    return GratingStrength(
        phi0=phi_base * contrast,
        n0=n_base * contrast,
        n_uniform=n_base * (1.0 - contrast) ** 2 / 4.0,
    )


def _required_m_max(n0: float, epsilon_trunc: float) -> int:
    """Smallest M with period-averaged Poisson mass above M below epsilon."""
    if n0 <= 0:
        return 0
    theta = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
    nbar = n0 * np.cos(theta) ** 2
    term = np.exp(-nbar)
    acc = term.mean()
    m = 0
    while 1.0 - acc > epsilon_trunc:
        m += 1
        if m > _M_HARD_LIMIT:
            raise TruncationError(
                f"cannot reach epsilon_trunc={epsilon_trunc} within "
                f"m={_M_HARD_LIMIT}", residual_mass=1.0 - acc)
        term = term * nbar / m
        acc += term.mean()
    return m


def default_j_max(phi0: float, m_max: int) -> int:
    return 2 * math.ceil(phi0) + m_max + 8


def channel_amplitudes(gs: GratingStrength, m_max: int | None = None,
                       j_max: int | None = None,
                       epsilon_trunc: float = 1e-6) -> ChannelSet:
    """Fourier amplitudes c_{m,j} of the per-channel transmission functions.

    t_m(x) = exp(i*phi0*cos^2(kx)) * exp(-nbar(x)/2) *
             (sqrt(n0)*cos(kx))^m / sqrt(m!),  nbar(x) = n0*cos^2(kx),
    expanded over one grating period at frequencies j*k_L.  The uniform
    running-wave absorption multiplies every amplitude by exp(-n_uniform/2).
    """
    needed = _required_m_max(gs.n0, epsilon_trunc)
    if m_max is None:
        m_max = needed
    elif m_max < needed:
        # residual mass past the caller's m_max
        theta = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
        nbar = gs.n0 * np.cos(theta) ** 2
        kept = np.zeros_like(nbar)
        term = np.exp(-nbar)
        for m in range(m_max + 1):
            if m > 0:
                term = term * nbar / m
            kept += term
        residual = float(1.0 - kept.mean())
        raise TruncationError(
            f"m_max={m_max} leaves residual Poisson mass {residual:.3e} "
            f"> epsilon_trunc={epsilon_trunc}", residual_mass=residual)
    if j_max is None:
        j_max = default_j_max(gs.phi0, m_max)
    if j_max < m_max:
        raise NumericsError(f"j_max={j_max} below m_max={m_max}")

    n_samp = 4 * j_max + 4  # >= 4*j_max + 1 keeps a Nyquist margin
    theta = 2.0 * np.pi * np.arange(n_samp) / n_samp
    cos_t = np.cos(theta)
    cos2 = cos_t ** 2
    base = np.exp(1j * gs.phi0 * cos2 - (gs.n_uniform + gs.n0 * cos2) / 2.0)

    channels = []
    amp = base
    total = 0.0
    order_idx = np.arange(-j_max, j_max + 1) % n_samp
    for m in range(m_max + 1):
        if m > 0:
            amp = amp * (math.sqrt(gs.n0) * cos_t) / math.sqrt(m)
        coeffs = np.fft.fft(amp) / n_samp
        cj = coeffs[order_idx]
        mass = float(np.sum(np.abs(cj) ** 2))
        channels.append(Channel(m=m, coeffs=cj, mass=mass))
        total += mass
    residual = max(0.0, math.exp(-gs.n_uniform) - total)
    return ChannelSet(channels=channels, m_max=m_max, j_max=j_max,
                      epsilon_trunc=epsilon_trunc, residual_mass=residual,
                      strength=gs)


def poisson_mass_oracle(gs: GratingStrength, m: int,
                        n_samp: int = 8192) -> float:
    """Period-averaged exp(-nbar) nbar^m / m!, independent of the FFT path."""
    theta = np.linspace(0.0, 2.0 * np.pi, n_samp, endpoint=False)
    nbar = gs.n0 * np.cos(theta) ** 2
    log_term = -nbar - gs.n_uniform + m * np.log(np.where(nbar > 0, nbar, 1.0)) \
        - math.lgamma(m + 1)
    term = np.where((nbar > 0) | (m == 0), np.exp(log_term), 0.0)
    return float(term.mean())


def poisson_consistency_check(cs: ChannelSet) -> float:
    """Max deviation of channel masses from the Poisson period integral."""
    dev = 0.0
    for ch in cs.channels:
        dev = max(dev, abs(ch.mass - poisson_mass_oracle(cs.strength, ch.m)))
    return dev


def kick_distribution(cs: ChannelSet, mol: MoleculeSpec) -> KickDistribution:
    """Fold depletion survival and fluorescence branching into kick weights.

    Channel-m mass is attenuated by (1 - p_dep)^m; the surviving mass splits
    over fluoresced-photon counts f ~ Binomial(m, phi_F).  The f = 0 part is
    a clean discrete kick at j*hbar*k_L, f > 0 parts are smeared by f
    independent uniform recoils.
    """
    orders = cs.orders
    discrete = np.zeros(orders.size)
    smear: list[tuple[int, int, float]] = []
    survival = 0.0
    for ch in cs.channels:
        weights = np.abs(ch.coeffs) ** 2 * (1.0 - mol.p_dep) ** ch.m
        survival += float(weights.sum())
        for f in range(ch.m + 1):
            bin_w = (math.comb(ch.m, f) * mol.phi_f ** f
                     * (1.0 - mol.phi_f) ** (ch.m - f))
            if bin_w == 0.0:
                continue
            if f == 0:
                discrete += weights * bin_w
            else:
                for j, w in zip(orders, weights):
                    p = float(w * bin_w)
                    if p > 0.0:
                        smear.append((int(j), f, p))
    return KickDistribution(orders=orders, discrete=discrete, smear=smear,
                            survival=survival)


@dataclass(frozen=True)
class FluorescenceKernel:
    """Momentum density of f independent uniform recoils on [-hbar*k_F, +hbar*k_F].

    The x projection of an isotropically emitted photon recoil is uniform on
    that interval; summing f of them gives the (scaled) Irwin-Hall density.
    """

    f: int
    recoil: float  # hbar*k_F = h / lambda_f

    @property
    def half_width(self) -> float:
        return self.f * self.recoil

    @property
    def variance(self) -> float:
        return self.f * self.recoil ** 2 / 3.0

    def pdf(self, p):
        p = np.asarray(p, dtype=float)
        y = (p + self.half_width) / (2.0 * self.recoil)
        out = np.zeros_like(y)
        inside = (y >= 0) & (y <= self.f)
        yk = y[inside]
        acc = np.zeros_like(yk)
        for k in range(self.f + 1):
            # the (yk - k)^(f-1) term only contributes where yk > k; guard
            # the f=1 case where 0**0 would otherwise evaluate to 1
            term = np.where(yk > k, np.clip(yk - k, 0.0, None), 0.0)
            acc += ((-1.0) ** k * math.comb(self.f, k)
                    * np.where(yk > k, term ** (self.f - 1), 0.0))
        out[inside] = acc / math.factorial(self.f - 1) / (2.0 * self.recoil)
        return out

    def cdf(self, p):
        p = np.asarray(p, dtype=float)
        y = np.clip((p + self.half_width) / (2.0 * self.recoil), 0.0, self.f)
        acc = np.zeros_like(y)
        for k in range(self.f + 1):
            acc += ((-1.0) ** k * math.comb(self.f, k)
                    * np.clip(y - k, 0.0, None) ** self.f)
        return acc / math.factorial(self.f)


def fluorescence_kernel(f: int, lambda_f: float) -> FluorescenceKernel:
    if f <= 0:
        raise NumericsError(f"fluorescence count must be >= 1, got {f}")
    return FluorescenceKernel(f=f, recoil=h_planck / lambda_f)


def second_moment(kd: KickDistribution, k_l: float, k_f: float) -> float:
    """Second moment of the full kick distribution, in (kg m/s)^2.

    Normalized by the surviving mass.  Smear entries add the base-order term
    plus f*(hbar*k_F)^2/3 from variance additivity of the uniform recoils.
    """
    pl = hbar * k_l
    pf = hbar * k_f
    total = float(np.sum(kd.discrete * (kd.orders * pl) ** 2))
    for j, f, p in kd.smear:
        total += p * ((j * pl) ** 2 + f * pf ** 2 / 3.0)
    return total / kd.survival if kd.survival > 0 else 0.0


@dataclass(frozen=True)
class OrderTable:
    """Vectorized kick tables over a batch of grating strengths.

    discrete[s, j_index] is the probability of a clean kick at order j for
    strength node s; smear[f][s, j_index] the mass smeared by f recoils.
    """

    orders: np.ndarray
    discrete: np.ndarray
    smear: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def survival(self) -> np.ndarray:
        total = self.discrete.sum(axis=1)
        for arr in self.smear.values():
            total = total + arr.sum(axis=1)
        return total


def order_table(phi0: np.ndarray, n0: np.ndarray, n_uniform: np.ndarray,
                p_dep: float, phi_f: float,
                epsilon_trunc: float = 1e-6) -> OrderTable:
    """Batched order probabilities for arrays of grating strengths.

    Identical physics to channel_amplitudes + kick_distribution, evaluated
    for many (phi0, n0) pairs in one set of batched FFTs.
    """
    phi0 = np.asarray(phi0, float)
    n0 = np.asarray(n0, float)
    n_uniform = np.asarray(n_uniform, float)
    n0_max = float(n0.max(initial=0.0))
    phi_max = float(phi0.max(initial=0.0))
    m_max = _required_m_max(n0_max, epsilon_trunc)
    j_max = default_j_max(phi_max, m_max)
    n_samp = 4 * j_max + 4
    theta = 2.0 * np.pi * np.arange(n_samp) / n_samp
    cos_t = np.cos(theta)
    cos2 = cos_t ** 2

    n_nodes = phi0.size
    orders = np.arange(-j_max, j_max + 1)
    order_idx = orders % n_samp
    discrete = np.zeros((n_nodes, orders.size))
    smear: dict[int, np.ndarray] = {}

    base = np.exp(1j * phi0[:, None] * cos2[None, :]
                  - (n_uniform[:, None] + n0[:, None] * cos2[None, :]) / 2.0)
    # Channels above a node's local Poisson reach carry negligible mass;
    # drop those nodes from the m loop early.
    m_cut = np.maximum(n0 + 12.0 * np.sqrt(np.maximum(n0, 1.0)), 4.0)
    active = np.arange(n_nodes)
    amp = base
    sqrt_n0 = np.sqrt(n0)
    for m in range(m_max + 1):
        if m > 0:
            keep = m_cut[active] >= m
            if not keep.all():
                active = active[keep]
                amp = amp[keep]
            if active.size == 0:
                break
            amp = amp * (sqrt_n0[active, None] * cos_t[None, :]) / math.sqrt(m)
        cj = np.fft.fft(amp, axis=1) / n_samp
        mass = np.abs(cj[:, order_idx]) ** 2 * (1.0 - p_dep) ** m
        discrete[active] += mass * (1.0 - phi_f) ** m
        if phi_f > 0.0 and m > 0:
            for f in range(1, m + 1):
                bin_w = (math.comb(m, f) * phi_f ** f
                         * (1.0 - phi_f) ** (m - f))
                if bin_w < 1e-15:
                    continue
                if f not in smear:
                    smear[f] = np.zeros_like(discrete)
                smear[f][active] += mass * bin_w
    return OrderTable(orders=orders, discrete=discrete, smear=smear)
