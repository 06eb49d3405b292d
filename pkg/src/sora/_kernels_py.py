"""Pure-Python (numpy) fallback for the compiled kernels in ``_kernels.pyx``."""
import numpy as np

NAME = "python"


def matmul(a, b):
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def matmul_tn(a, b):
    return np.asarray(a, dtype=np.float64).T @ np.asarray(b, dtype=np.float64)


def matmul_nt(a, b):
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64).T


def gated_forward(wd, wu, gate, x):
    h = matmul(wd, x)
    hp = np.asarray(gate, dtype=np.float64)[:, None] * h
    z = matmul(wu, hp)
    return h, hp, z


def gated_backward(wd, wu, gate, x, h, hp, grad_z):
    gu = matmul_tn(wu, grad_z)
    d_gate = np.einsum("ij,ij->i", gu, h)
    gwd = np.asarray(gate, dtype=np.float64)[:, None] * gu
    d_wu = matmul_nt(grad_z, hp)
    d_wd = matmul_nt(gwd, x)
    grad_x = matmul_tn(wd, gwd)
    return d_wd, d_wu, d_gate, grad_x


def soft_threshold(v, xi):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > xi, v - xi, np.where(v <= -xi, v + xi, 0.0))


def prox_step(gate, d_gate, eta, lam):
    a = np.asarray(gate, dtype=np.float64) - eta * np.asarray(d_gate, dtype=np.float64)
    return soft_threshold(a, eta * lam)
