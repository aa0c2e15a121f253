"""Partials of ``atan(vy/u)**2`` up to fourth order (generated by tools/gen_slip_derivs.py)."""

import math

from numba import njit

# (d/du)^p (d/dvy)^q for each output slot, in order
ORDERS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3), (4, 0), (3, 1), (2, 2), (1, 3), (0, 4))


@njit(cache=True)
def slip_partials(u, vy, out):
    x0 = 1/u
    x1 = vy*x0
    x2 = math.atan(x1)
    x3 = u**(-2)
    x4 = vy**2*x3
    x5 = x4 + 1
    x6 = 1/x5
    x7 = 2*x2
    x8 = x6*x7
    x9 = u**(-3)
    x10 = x1*x6
    x11 = x10 - x4*x8
    x12 = vy*x6
    x13 = 2*x3
    x14 = x5**(-2)
    x15 = x1*x7
    x16 = 3*x10
    x17 = 3*x2
    x18 = x4*x6
    x19 = x18*x2
    x20 = vy**3
    x21 = x14*x9
    x22 = x20*x21
    x23 = u**(-4)
    x24 = x14*x23
    x25 = vy**4*x24
    x26 = x2*x25
    x27 = -3*x22 + 4*x26
    x28 = 4*x6
    x29 = x23*x28
    x30 = x28*x4
    x31 = 1 - x30
    x32 = x1*x2
    x33 = 4*x21
    x34 = u**(-5)
    x35 = 6*x2
    x36 = 9*x10
    x37 = x5**(-3)
    x38 = vy**5*x34
    x39 = x37*x38
    x40 = 12*x2
    x41 = vy**6*x37/u**6
    x42 = 24*x2
    x43 = x20*x6*x9
    x44 = 4*x24
    out[0] = x2**2
    out[1] = -vy*x3*x8
    out[2] = x0*x8
    out[3] = 2*x12*x9*(x11 + x7)
    out[4] = -x13*x6*(x11 + x2)
    out[5] = x13*x14*(1 - x15)
    out[6] = -vy*x29*(x16 + x17 - 7*x19 + x27)
    out[7] = x28*x9*(2*x10 - 5*x19 + x2 + x27)
    out[8] = x33*(x15 + 3*x18 + x31*x32 - 1)
    out[9] = -x33*(x16 - x2*x30 + x2)
    out[10] = 8*x12*x34*(-24*x19 - 20*x22 + 30*x26 + x35 + x36 + 11*x39 - x40*x41)
    out[11] = -x29*(x17 - 27*x19 - 31*x22 + 48*x26 + x36 + 22*x39 - x41*x42)
    out[12] = x44*(-x14*x38*x42 - 22*x18 + 36*x2*x43 + 22*x25 - 12*x32 + 3)
    out[13] = x44*(4*x10*x31 + x17*x31 - 12*x19*(1 - 2*x18) - 6*x22 + x36)
    out[14] = -8*x23*x37*(-x1*x35 - 11*x18 + x40*x43 + 2)
