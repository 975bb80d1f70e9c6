import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def fd_gradient(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function, the independent
    oracle for every autograd check (64-bit inputs expected)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def autograd_gradient(f, x):
    x = x.detach().clone().double().requires_grad_(True)
    out = f(x)
    out.backward()
    return x.grad.detach().clone()


def rel_error(analytic, numeric):
    num = float((analytic - numeric).abs().max())
    den = max(float(numeric.abs().max()), 1e-8)
    return num / den


def check_gradient(f, x, tol, eps=1e-6):
    ana = autograd_gradient(f, x)
    num = fd_gradient(f, x, eps=eps)
    err = rel_error(ana, num)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def param_fd_gradient(f, params, eps=1e-6):
    """Finite-difference gradient w.r.t. a list of parameter tensors."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(f())
                flat[i] = orig - eps
                fm = float(f())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * eps)
            grads.append(g)
    return grads


def smooth_random_field(rng, shape, magnitude=2.0, sigma=3.0):
    from scipy.ndimage import gaussian_filter

    f = rng.normal(0.0, 1.0, size=(2,) + tuple(shape))
    f = gaussian_filter(f, sigma=(0.0, sigma, sigma))
    peak = np.abs(f).max()
    return (f * (magnitude / peak)).astype(np.float64)
