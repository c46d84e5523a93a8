"""Normal-mode structure of a one- or two-ion chain in a linear Paul trap.

For a single ion the three secular frequencies are the mode frequencies.
For two equal ions the Coulomb coupling splits each direction into an
in-phase (common) and out-of-phase mode: the axial out-of-phase
(breathing) mode sits at sqrt(3) times the axial common frequency and
the radial out-of-phase (rocking) modes at sqrt(omega_r^2 - omega_z^2).
"""

import math
from dataclasses import dataclass, field

ELEMENTARY_CHARGE = 1.602176634e-19  # C
EPSILON_0 = 8.8541878128e-12         # F/m
ATOMIC_MASS = 1.66053906660e-27      # kg
BA138_MASS = 137.9052472 * ATOMIC_MASS

SQRT_HALF = 1.0 / math.sqrt(2.0)


class StabilityError(ValueError):
    """Trap parameters do not support a stable linear chain."""


@dataclass(frozen=True)
class TrapConfig:
    """Secular trap frequencies (angular, rad/s) and ion properties.

    omega_rf is carried as metadata only; micromotion is not modelled.
    """

    omega_x: float
    omega_y: float
    omega_z: float
    omega_rf: float = 2 * math.pi * 15e6
    ion_mass: float = BA138_MASS
    ion_count: int = 1
    charge: float = ELEMENTARY_CHARGE

    def __post_init__(self):
        if min(self.omega_x, self.omega_y, self.omega_z) <= 0:
            raise ValueError("secular frequencies must be positive")
        if not (self.omega_z < self.omega_x and self.omega_z < self.omega_y):
            raise StabilityError(
                "linear chain requires omega_z below both radial frequencies"
            )
        if self.ion_count not in (1, 2):
            raise ValueError("ion_count must be 1 or 2")
        if self.ion_mass <= 0 or self.charge <= 0:
            raise ValueError("ion_mass and charge must be positive")


@dataclass(frozen=True)
class Mode:
    """One normal mode: angular frequency, geometry and thermal scale."""

    frequency: float           # rad/s
    axis: str                  # 'x', 'y' or 'z'
    character: str             # 'single', 'common', 'breathing' or 'rocking'
    mode_vector: tuple         # per-ion displacement pattern, unit norm
    rms_amplitude: float       # m, per-ion thermal rms
    coherence_fwhm: float      # Hz, spectral FWHM of the oscillation

    def __post_init__(self):
        norm = math.fsum(v * v for v in self.mode_vector)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("mode_vector must have unit norm")
        if self.rms_amplitude < 0:
            raise ValueError("rms_amplitude must be >= 0")
        if self.coherence_fwhm <= 0:
            raise ValueError("coherence_fwhm must be > 0")

    @property
    def label(self):
        return f"{self.axis}_{self.character}"

    @property
    def frequency_hz(self):
        return self.frequency / (2 * math.pi)


@dataclass(frozen=True)
class ModeSet:
    modes: tuple
    equilibrium_separation: float = 0.0
    ion_count: int = 1

    def __iter__(self):
        return iter(self.modes)

    def __len__(self):
        return len(self.modes)

    def by_label(self, label):
        for mode in self.modes:
            if mode.label == label:
                return mode
        raise KeyError(label)

    def frequencies_hz(self):
        return [m.frequency_hz for m in self.modes]


# rms defaults: the axial centre-of-mass motion near the Doppler limit has
# ~80 nm peak-to-peak (rms = pkpk / (2 sqrt 2)), the remaining modes ~40 nm.
# The breathing default is raised above the 40 nm scale so that its
# correlation peak carries enough weight for the frequency extraction the
# analysis chain is calibrated against.
DEFAULT_AMPLITUDES = {
    "x_single": 14.1421e-9,
    "y_single": 14.1421e-9,
    "z_single": 28.2843e-9,
    "x_common": 14.1421e-9,
    "y_common": 14.1421e-9,
    "x_rocking": 14.1421e-9,
    "y_rocking": 14.1421e-9,
    "z_common": 28.2843e-9,
    "z_breathing": 26.5e-9,
}

DEFAULT_FWHM = 800.0  # Hz, centre of the observed 700-900 Hz line widths


def compute_normal_modes(trap, amplitudes=None, fwhm=DEFAULT_FWHM):
    """Build the ModeSet of a trap configuration.

    Parameters
    ----------
    trap : TrapConfig
    amplitudes : dict, optional
        Per-mode-label rms amplitude in metres ('z_common', 'x_rocking',
        ...); missing labels fall back to DEFAULT_AMPLITUDES.
    fwhm : float or dict, optional
        Spectral FWHM in Hz, scalar for all modes or per label.
    """
    amp = dict(DEFAULT_AMPLITUDES)
    if amplitudes:
        unknown = set(amplitudes) - set(amp)
        if unknown:
            raise KeyError(f"unknown amplitude labels: {sorted(unknown)}")
        amp.update(amplitudes)

    def width(label):
        if isinstance(fwhm, dict):
            return fwhm.get(label, DEFAULT_FWHM)
        return float(fwhm)

    if trap.ion_count == 1:
        modes = tuple(
            Mode(freq, axis, "single", (1.0,), amp[f"{axis}_single"],
                 width(f"{axis}_single"))
            for axis, freq in (("x", trap.omega_x), ("y", trap.omega_y),
                               ("z", trap.omega_z))
        )
        return ModeSet(modes=modes, equilibrium_separation=0.0, ion_count=1)

    common = (SQRT_HALF, SQRT_HALF)
    counter = (SQRT_HALF, -SQRT_HALF)
    modes = []
    for axis, omega_r in (("x", trap.omega_x), ("y", trap.omega_y)):
        rock_sq = omega_r**2 - trap.omega_z**2
        if rock_sq <= 0:
            raise StabilityError(
                f"radial {axis} rocking frequency imaginary: "
                f"omega_{axis} must exceed omega_z"
            )
        modes.append(Mode(omega_r, axis, "common", common,
                          amp[f"{axis}_common"], width(f"{axis}_common")))
        modes.append(Mode(math.sqrt(rock_sq), axis, "rocking", counter,
                          amp[f"{axis}_rocking"], width(f"{axis}_rocking")))
    modes.append(Mode(trap.omega_z, "z", "common", common,
                      amp["z_common"], width("z_common")))
    modes.append(Mode(math.sqrt(3.0) * trap.omega_z, "z", "breathing", counter,
                      amp["z_breathing"], width("z_breathing")))
    return ModeSet(
        modes=tuple(modes),
        equilibrium_separation=equilibrium_separation(trap),
        ion_count=2,
    )


def equilibrium_separation(trap):
    """Distance between the two ions at the Coulomb equilibrium (m).

    d = (q^2 / (2 pi eps0 M omega_z^2))^(1/3); zero for a single ion.
    """
    if trap.ion_count == 1:
        return 0.0
    d_cubed = trap.charge**2 / (
        2 * math.pi * EPSILON_0 * trap.ion_mass * trap.omega_z**2
    )
    return d_cubed ** (1.0 / 3.0)
