import numpy as np
import pytest

from vicount.annotations import (
    ClipAnnotation,
    FrameAnnotation,
    HeadPoint,
    Supervision,
)
from vicount.model import ModelConfig


def make_frame(ids_xy, index=0, width=100, height=100):
    """Frame from a list of (id, x, y); id None for unlabeled points."""
    points = tuple(HeadPoint(x=float(x), y=float(y), track_id=i) for i, x, y in ids_xy)
    return FrameAnnotation(frame_index=index, points=points, width=width, height=height)


def random_frame(rng, ids, index=0, width=100, height=100):
    return make_frame(
        [(int(i), rng.uniform(0, width), rng.uniform(0, height)) for i in ids],
        index=index, width=width, height=height,
    )


def random_clip(rng, n_frames=6, id_pool=20, width=100, height=100, clip_id="clip"):
    """Fully labeled clip whose frames hold random id subsets."""
    frames = []
    for t in range(n_frames):
        size = int(rng.integers(0, id_pool + 1))
        ids = rng.choice(id_pool, size=size, replace=False)
        frames.append(random_frame(rng, ids, index=t, width=width, height=height))
    return ClipAnnotation(
        clip_id=clip_id, frames=tuple(frames), fps=5.0, supervision=Supervision.FULL
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides):
    """Desk-scale config used by shape/gradient tests (2 levels, 8 channels)."""
    base = dict(n_levels=2, n_blocks=1, n_heads=2, channels=8, backbone_width=8)
    base.update(overrides)
    return ModelConfig(**base)


def gradient_check(model, images_a, images_b, gt, n_coords, seed=0, rel_tol=1e-4):
    """Analytic grads of the total loss vs central finite differences.

    Runs in float64; eps scales with the parameter magnitude. Samples one
    coordinate (the largest-gradient one) per parameter tensor plus random
    extras until n_coords are covered. Returns the worst relative error.
    """
    import torch

    from vicount.training import loss

    model = model.double()
    images_a = images_a.double()
    images_b = images_b.double()

    def eval_total():
        outputs = model(images_a, images_b)
        total, _ = loss(outputs, gt, model.config.variant)
        return total

    total = eval_total()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(total, [p for _, p in named])

    gen = np.random.default_rng(seed)
    coords = []
    for (name, param), grad in zip(named, grads):
        flat = grad.reshape(-1)
        coords.append((name, param, int(flat.abs().argmax()), float(flat[flat.abs().argmax()])))
    while len(coords) < n_coords:
        name, param = named[int(gen.integers(0, len(named)))]
        idx = int(gen.integers(0, param.numel()))
        grad = grads[[n for n, _ in named].index(name)].reshape(-1)
        coords.append((name, param, idx, float(grad[idx])))
    coords = coords[: max(n_coords, len(named))]

    worst = 0.0
    with torch.no_grad():
        for name, param, idx, analytic in coords:
            flat = param.reshape(-1)
            orig = float(flat[idx])
            eps = 1e-5 * max(1.0, abs(orig))
            flat[idx] = orig + eps
            plus = float(eval_total())
            flat[idx] = orig - eps
            minus = float(eval_total())
            flat[idx] = orig
            fd = (plus - minus) / (2 * eps)
            err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            assert err < rel_tol, (
                f"{name}[{idx}]: analytic {analytic:.3e} vs fd {fd:.3e} (rel {err:.2e})"
            )
            worst = max(worst, err)
    return len(coords), worst
