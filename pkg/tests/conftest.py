import numpy as np
import pytest

from usmae import tensor as T
from usmae.vit_mae import ModelConfig, init_parameters, reconstruction_step, sample_mask


def numeric_grad(f, arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = float(np.sum(f()))
        flat[i] = old - step
        lo = float(np.sum(f()))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def micro_mae_gradient_error(seed: int, samples_per_param: int = 6) -> float:
    """Relative error between backprop and central differences for a tiny MAE.

    Image 8x8, patch 4, width 8, one encoder and one decoder block.  Call in
    float64 mode.  A few entries of every encoder/decoder tensor are probed.
    """
    cfg = ModelConfig(image_size=8, patch_size=4, in_channels=3, encoder_dim=8, encoder_depth=1, encoder_heads=2,
                      decoder_depth=1)
    rng = np.random.default_rng(seed)
    model = init_parameters(cfg, rng)
    # larger weights than the 0.02 init so every path carries signal
    for p in model.params.values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.3
    patches = rng.standard_normal((2, cfg.num_patches, cfg.patch_dim))
    plans = [sample_mask(cfg.num_patches, 0.5, rng) for _ in range(2)]
    reconstruction_step(model, patches, plans).backward()

    def objective():
        with T.no_grad():
            return reconstruction_step(model, patches, plans).item()

    analytic, numeric = [], []
    for name, p in model.params.items():
        if name.startswith("head."):
            continue
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, samples_per_param), replace=False):
            old = flat[i]
            flat[i] = old + 1e-3
            hi = objective()
            flat[i] = old - 1e-3
            lo = objective()
            flat[i] = old
            numeric.append((hi - lo) / 2e-3)
            analytic.append(p.grad.reshape(-1)[i])
    return rel_error(analytic, numeric)


@pytest.fixture
def f64():
    with T.float64_mode():
        yield


# ------------------------------------------------------- acceptance report

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
