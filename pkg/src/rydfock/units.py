"""Unit conventions and physical constants.

Internal units everywhere: angular frequencies in rad/us, lengths in um,
times in us, temperatures in uK, masses in kg.  Velocities in um/us, which
is numerically identical to m/s.  Config files carry ordinary frequencies
in MHz; `rad_per_us` converts on the way in.
"""

import math

TWO_PI = 2.0 * math.pi

KB = 1.380649e-23  # J/K
AMU = 1.66053906660e-27  # kg
RB87_MASS = 86.909180527 * AMU  # kg


def rad_per_us(f_mhz):
    """Ordinary frequency in MHz -> angular frequency in rad/us."""
    return TWO_PI * f_mhz


def mhz(omega):
    """Angular frequency in rad/us -> ordinary frequency in MHz."""
    return omega / TWO_PI


def thermal_velocity_sigma(temperature, atom_mass=RB87_MASS):
    """Per-axis Maxwell-Boltzmann velocity std dev in um/us.

    temperature in uK, atom_mass in kg.  sqrt(kB T / m) in m/s equals the
    same number in um/us.
    """
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    return math.sqrt(KB * temperature * 1e-6 / atom_mass)
