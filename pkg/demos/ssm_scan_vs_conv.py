"""
Recurrent scan and convolution give the same output
===================================================

A stable linear state-space model is discretized with a zero-order hold and
run over a random input twice: once as a step-by-step recurrence and once as
a causal convolution with its precomputed kernel.
"""
import time

import numpy as np

from airground.ssm import ContinuousSsm, conv_apply, conv_kernel, discretize, scan

rng = np.random.default_rng(0)
n, length = 6, 4096

# a random stable system: shift the spectrum into the left half plane
a = rng.normal(size=(n, n))
a -= (np.max(np.linalg.eigvals(a).real) + 0.5) * np.eye(n)
sys_d = discretize(ContinuousSsm(a, rng.normal(size=(n, 1)), rng.normal(size=(1, n))), 0.05)
x = rng.normal(size=length)

t0 = time.perf_counter()
y_scan = scan(sys_d, x)
t1 = time.perf_counter()
y_conv = conv_apply(conv_kernel(sys_d, length), x)
t2 = time.perf_counter()

print(f"scan        {1e3 * (t1 - t0):7.2f} ms")
print(f"convolution {1e3 * (t2 - t1):7.2f} ms (kernel included)")
print(f"max |difference| = {np.max(np.abs(y_scan - y_conv)):.2e}")

# the discrete transition approaches I + delta * A as the step shrinks
for delta in (1e-1, 1e-2, 1e-3, 1e-4):
    d = discretize(ContinuousSsm(a, np.ones((n, 1)), np.ones((1, n))), delta)
    err = np.max(np.abs((d.a_bar - np.eye(n)) / delta - a))
    print(f"delta={delta:.0e}  |(A_bar - I)/delta - A| = {err:.2e}")
