"""diglab: a desk-scale laboratory for GAN training dynamics.

Implements a tape-based autodiff engine with double backprop, tiny dense
networks, the discriminator gradient-gap regularizer plus the standard
gradient penalties, and the two-point attractor experiment suite.
"""

__version__ = "0.1.0"
