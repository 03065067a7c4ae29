"""Shared test utilities: finite-difference gradient verification."""

import torch


def finite_diff_max_rel_error(model, loss_fn, eps=1e-5):
    """Max relative disagreement between analytic gradients and central
    finite differences over every parameter of `model`.

    `loss_fn()` must be a deterministic scalar function of the model
    parameters. The model must be in double precision. Entries where both
    estimates are numerically zero (< 1e-6 at unit loss scale) are checked
    for absolute agreement instead and excluded from the relative max.
    """
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst_rel = 0.0
    for _, param in model.named_parameters():
        grad = param.grad
        flat = param.data.view(-1)
        grad_flat = (grad.view(-1) if grad is not None
                     else torch.zeros_like(flat))
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                hi = loss_fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = grad_flat[i].item()
            scale = max(abs(fd), abs(an))
            if scale < 1e-6:
                assert abs(fd - an) < 1e-8, f"zero-gradient mismatch: fd={fd}, analytic={an}"
                continue
            worst_rel = max(worst_rel, abs(fd - an) / scale)
    return worst_rel
