"""Reference values computed once with independent tools and frozen here.

K0_RATIO: K0(rho/20) / K0(5/20), mpmath at 30 digits (scipy.special.k0 agrees
to 2e-16). BESSEL_GRID_RESIDUAL: relative residual of that profile sampled onto
a 512^2 lattice (disk of radius 5 held at 1, absorbing walls).
"""

K0_RATIO = {
    10: 0.5996853860543114,
    15: 0.39609454945430383,
    20: 0.2731252639015465,
    30: 0.13869907639028325,
    40: 0.07388477063580998,
    50: 0.040445851534466205,
    60: 0.022536070217108947,
}

DISK_PIXELS_R5 = 81

BESSEL_GRID_RESIDUAL = 0.05878628583586553
