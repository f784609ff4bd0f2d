"""High-precision reference values frozen into the Rust unit tests.

Run with `python3 tools/oracle_values.py`; requires mpmath.
"""
from mpmath import mp, mpf, log, exp, expm1

mp.dps = 50


def softplus(x):
    return log(1 + exp(x))


def phi(ell, beta):
    return (ell / expm1(ell)) ** beta


def margin(ell_w, ell_l, beta):
    return softplus(phi(ell_l, beta) - phi(ell_w, beta))


def amplification(ell):
    e = exp(ell)
    return (ell * e - e + 1) / (e - 1) ** 2


def alternate_form(ell):
    e = exp(ell)
    return (e - ell - 1) / (e - 1) ** 2


rows = [
    ("softplus(-0.18877)", softplus(mpf("-0.18877"))),
    ("lambda(alpha=0.8, sigma=0.6)", log(mpf("0.64") / mpf("0.36"))),
    ("phi(1, 1)", phi(mpf(1), 1)),
    ("phi(1, 8)", phi(mpf(1), 8)),
    ("phi(0.5, 1) - phi(1, 1)", phi(mpf("0.5"), 1) - phi(mpf(1), 1)),
    ("margin(0.5, 1.0, beta=1)", margin(mpf("0.5"), mpf(1), 1)),
    ("margin(1.0, 0.5, beta=1)", margin(mpf(1), mpf("0.5"), 1)),
    ("margin(0.5, 1.0, beta=8)", margin(mpf("0.5"), mpf(1), 8)),
    ("mapo total (0.5, 1.0, beta=1)", mpf("0.5") + margin(mpf("0.5"), mpf(1), 1)),
    ("mapo total (0.5, 1.0, beta=8)", mpf("0.5") + margin(mpf("0.5"), mpf(1), 8) / 8),
    ("amplification(1)", amplification(mpf(1))),
    ("amplification(5)", amplification(mpf(5))),
    ("amplification(1e-8)", amplification(mpf("1e-8"))),
    ("alternate (e^K-K-1)/(e^K-1)^2 at K=1", alternate_form(mpf(1))),
    ("log(2)", log(2)),
    ("2D Gaussian mass within 2 std: 1 - e^-2", 1 - exp(-2)),
]
for name, value in rows:
    print(f"{name:45s} {mp.nstr(value, 20)}")
