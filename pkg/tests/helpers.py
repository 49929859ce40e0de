import torch


def central_diff_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``x`` by central differences, one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def central_diff_directional(fn, x: torch.Tensor, v: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    with torch.no_grad():
        return (fn(x + h * v) - fn(x - h * v)) / (2 * h)


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / b.norm().clamp_min(1e-300))
