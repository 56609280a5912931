"""Central finite-difference verification of tape gradients.

Core routine: perturb each parameter entry by +/-eps, re-run the forward
function, and compare the two-sided slope against the recorded gradient.
Slow by construction, so callers keep the probed functions tiny.
"""

import numpy as np

from .tensor import Graph


def rel_error(a, b, floor=1e-12):
    """Normalized L2 distance between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return num / den


def finite_diff_grad(build_loss, param, eps):
    """Two-sided finite-difference gradient of build_loss() w.r.t. param.data.

    build_loss must re-run the forward pass from the current parameter
    values each call. param.data is perturbed in place and restored.
    """
    fd = np.zeros(param.data.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = build_loss().item()
        flat[i] = orig - eps
        fm = build_loss().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return fd


def check_gradients(build_loss, params, eps):
    """Max relative error between tape and finite-difference gradients.

    params: dict name -> Tensor (requires_grad=True). Returns (worst_err,
    per-param dict). One backward pass supplies all tape gradients; finite
    differences run with no graph open, so nothing extra is recorded.
    """
    for p in params.values():
        p.zero_grad()
    with Graph() as g:
        loss = build_loss()
    g.backward(loss)
    errors = {}
    for name, p in params.items():
        tape_grad = np.zeros_like(p.data) if p.grad is None else p.grad
        fd = finite_diff_grad(build_loss, p, eps)
        errors[name] = rel_error(tape_grad, fd)
    worst = max(errors.values()) if errors else 0.0
    return worst, errors


def spot_check_gradients(build_loss, params, eps, n_samples, rng):
    """check_gradients on a random subset of parameter entries.

    Sweeping every entry of a whole model is quadratic in its size, so
    whole-model checks sample instead: n_samples (parameter, index) pairs
    drawn uniformly, two forward passes each. The sampled tape and
    finite-difference values are compared as vectors with rel_error, which
    keeps near-zero entries from dominating. Returns (rel_err, n_samples).
    """
    for p in params.values():
        p.zero_grad()
    with Graph() as g:
        loss = build_loss()
    g.backward(loss)
    names = sorted(params)
    tape_vals = np.zeros(n_samples, dtype=np.float64)
    fd_vals = np.zeros(n_samples, dtype=np.float64)
    for s in range(n_samples):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + eps
        fp = build_loss().item()
        flat[i] = orig - eps
        fm = build_loss().item()
        flat[i] = orig
        fd_vals[s] = (fp - fm) / (2.0 * eps)
        if p.grad is not None:
            tape_vals[s] = float(p.grad.reshape(-1)[i])
    return rel_error(tape_vals, fd_vals), n_samples
