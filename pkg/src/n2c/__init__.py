"""n2c: a self-supervised thin-slice volume denoising laboratory.

Trains a slice-wise denoiser against each slice's two neighbors, checks the
algebra that makes that training signal equivalent to clean supervision, and
benchmarks the result against classical filters on synthetic volumes.
"""

__version__ = "0.1.0"
