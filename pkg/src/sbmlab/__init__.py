"""sbmlab: a simulation and verification lab for the (1+beta)-stable
super-Brownian motion, its occupation local time, and the Tanaka-type
decomposition of the local time and its spatial derivative."""

__version__ = "0.1.0"
