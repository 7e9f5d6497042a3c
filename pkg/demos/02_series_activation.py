# The series activation: a depthwise sum of shifted ReLUs.
#
# With a (C, 2n+1, 2n+1) kernel of ones every output counts its in-image
# neighbours, and with n=0, a=1, b=0 it is exactly ReLU.

import numpy as np

from vanillanet.activation import SeriesActivationParams, complexity_ratio, relu, series_activation

x = np.ones((1, 1, 5, 5))
ones = SeriesActivationParams(np.ones((1, 3, 3)), np.zeros(1))
print("neighbour counts with a 3x3 kernel of ones:")
print(series_activation(x, ones)[0, 0].astype(int))

rng = np.random.default_rng(0)
z = rng.standard_normal((4, 8, 16, 16))
plain = SeriesActivationParams.plain(8, 0)
print("n=0 equals ReLU bitwise:", np.array_equal(series_activation(z, plain), relu(z)))

# A negative bias shifts every copy before the ReLU.
shifted = SeriesActivationParams(np.ones((8, 1, 1)), np.full(8, -0.5))
print("fraction active at b=-0.5:", (series_activation(z, shifted) > 0).mean().round(3))

# How much cheaper the activation is than a convolution of the same size.
for c_out in (2048, 4096):
    print(f"conv / activation cost for C_out={c_out}: {complexity_ratio(c_out, 1, 7):.1f}")
