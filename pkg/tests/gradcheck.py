import numpy as np
import torch


def finite_difference_check(fn, inputs, eps=1e-6, rtol=1e-3, atol=1e-8):
    """Compare autograd against central differences for every entry of every input.

    Returns the worst relative error found.
    """
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            flat = x.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = fn(*inputs).item()
                flat[i] = old - eps
                down = fn(*inputs).item()
                flat[i] = old
                num = (up - down) / (2 * eps)
                ana = g.view(-1)[i].item()
                err = abs(num - ana) / max(abs(num), abs(ana), atol / rtol)
                worst = max(worst, err)
    return worst
