"""Unit conventions and problem-wide constants.

Internally everything is kpc, Myr and kpc/Myr. Delta-v crosses the public
boundary in km/s.
"""

KPC_KM = 3.0857e16
MYR_S = 3.15576e13

# 1 kpc/Myr in km/s, 6 significant digits.
KPC_PER_MYR_KMS = 977.799

T_END = 90.0
WAIT_TIME = 2.0
MAX_OFFSPRING = 3

R_MIN = 2.0
R_MAX = 32.0
N_RINGS = 30
N_SLICES = 32


def kms_to_internal(dv):
    return dv / KPC_PER_MYR_KMS


def internal_to_kms(dv):
    return dv * KPC_PER_MYR_KMS
