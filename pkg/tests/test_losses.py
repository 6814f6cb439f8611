import math

import pytest
import torch

from pise.losses import (GradientTrace, LossWeights, composite_loss, epoch_grad_norm, grad_index,
                         parameter_grad_norm, perceptual_term)
from pise.models import FeatureExtractor


def tiny_extractor(dtype=torch.float32):
    """Three-tap random conv trunk (frozen), enough to exercise the feature term."""
    torch.manual_seed(0)
    trunk = torch.nn.Sequential(
        torch.nn.Conv2d(1, 3, 3, padding=1), torch.nn.ReLU(),
        torch.nn.Conv2d(3, 4, 3, padding=1), torch.nn.ReLU(),
        torch.nn.MaxPool2d(2),
        torch.nn.Conv2d(4, 4, 3, padding=1), torch.nn.ReLU(),
    ).to(dtype)
    names = ["c1", "r1", "c2", "r2", "p", "c3", "r3"]
    return FeatureExtractor("domain_cnn", trunk, names, ("r1", "r2", "r3"), [0.5], [0.25]).to(dtype)


def test_default_weights():
    assert LossWeights() == LossWeights(1.0, 0.05)


@pytest.mark.parametrize("mse, perc", [(0, 0), (-1, 0.05), (1, -0.1)])
def test_invalid_weights(mse, perc):
    with pytest.raises(ValueError):
        LossWeights(mse, perc)


def test_analytic_mse():
    x = torch.zeros(2, 4, 4)
    for c in (0.0, 0.3, 1.7):
        loss = composite_loss(x, torch.full_like(x, c), weights=LossWeights(2.0, 0.0))
        assert float(loss) == pytest.approx(2.0 * c * c)


def test_zero_iff_equal():
    ext = tiny_extractor()
    x = torch.rand(2, 6, 6)
    assert float(composite_loss(x, x.clone(), ext)) == 0.0
    assert float(composite_loss(x, x + 1e-3, ext)) > 0.0


def test_symmetric():
    ext = tiny_extractor()
    a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    assert float(composite_loss(a, b, ext)) == pytest.approx(float(composite_loss(b, a, ext)), rel=1e-6)


def test_perceptual_weight_scales_linearly():
    ext = tiny_extractor()
    x, x_hat = torch.rand(2, 8, 8), torch.rand(2, 8, 8)
    mse = float(composite_loss(x, x_hat, weights=LossWeights(1.0, 0.0)))
    one = float(composite_loss(x, x_hat, ext, LossWeights(1.0, 0.05))) - mse
    k = float(composite_loss(x, x_hat, ext, LossWeights(1.0, 0.35))) - mse
    assert k == pytest.approx(7 * one, rel=1e-5)


def test_perceptual_term_is_sum_of_per_tap_means():
    ext = tiny_extractor()
    x, x_hat = torch.rand(2, 8, 8), torch.rand(2, 8, 8)
    expected = sum(float((a - b).abs().mean()) for a, b in zip(ext(x), ext(x_hat)))
    assert float(perceptual_term(x, x_hat, ext)) == pytest.approx(expected, rel=1e-6)


def test_errors():
    with pytest.raises(ValueError, match="extractor"):
        composite_loss(torch.rand(1, 4, 4), torch.rand(1, 4, 4), None, LossWeights(1, 0.05))
    with pytest.raises(ValueError, match="shape"):
        composite_loss(torch.rand(1, 4, 4), torch.rand(1, 4, 5))


def test_gradient_matches_central_differences():
    ext = tiny_extractor(torch.float64)
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(1, 4, 4, generator=gen, dtype=torch.float64)
    x_hat = torch.rand(1, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    w = LossWeights(1.0, 0.05)
    composite_loss(x, x_hat, ext, w).backward()
    h = 1e-4
    numeric = torch.zeros_like(x_hat)
    with torch.no_grad():
        for i in range(x_hat.numel()):
            plus, minus = x_hat.clone(), x_hat.clone()
            plus.view(-1)[i] += h
            minus.view(-1)[i] -= h
            numeric.view(-1)[i] = (composite_loss(x, plus, ext, w) - composite_loss(x, minus, ext, w)) / (2 * h)
    rel = (x_hat.grad - numeric).norm() / numeric.norm()
    assert rel <= 1e-3


# -- gradient norm ----------------------------------------------------------

def test_square_has_gradient_six_at_three():
    theta = torch.nn.Parameter(torch.tensor(3.0))
    model = torch.nn.Module()
    model.theta = theta
    g, loss = epoch_grad_norm(model, [None], lambda m, _: m.theta ** 2)
    assert g == 6.0 and loss == 9.0
    assert theta.grad is None


def test_detached_output_has_zero_gradient():
    lin = torch.nn.Linear(3, 3)
    x = torch.rand(4, 3)
    g, _ = epoch_grad_norm(lin, [x, x], lambda m, b: m(b).detach().pow(2).mean())
    assert g == 0.0


def test_mean_over_batches_and_determinism():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 1)
    batches = [torch.rand(5, 3) for _ in range(3)]
    fn = lambda m, b: m(b).pow(2).mean()
    per = []
    for b in batches:
        lin.zero_grad()
        fn(lin, b).backward()
        per.append(parameter_grad_norm(lin.parameters()))
    g, _ = epoch_grad_norm(lin, batches, fn)
    assert g == pytest.approx(sum(per) / 3, rel=1e-12)
    assert epoch_grad_norm(lin, batches, fn)[0] == g


def test_empty_validation_set():
    with pytest.raises(ValueError):
        epoch_grad_norm(torch.nn.Linear(1, 1), [], lambda m, b: m(b).sum())


# -- trace and index ----------------------------------------------------------

def test_constant_trace_index_is_one():
    assert grad_index([0.7] * 15) == 1.0


def test_index_arithmetic():
    assert grad_index([1.0, 5, 5, 0.01, 0.01, 0.01, 0.01, 0.01]) == pytest.approx(0.01)


def test_strictly_decaying_trace_below_one():
    assert grad_index([math.exp(-t / 4) for t in range(10)]) < 1


@pytest.mark.parametrize("trace, window", [([1.0] * 4, 5), ([1.0], 1), ([0.0, 1, 1, 1, 1, 1], 5),
                                           ([1.0] * 6, 0)])
def test_index_errors(trace, window):
    with pytest.raises(ValueError):
        grad_index(trace, window)


def test_trace_validation_and_csv(tmp_path):
    tr = GradientTrace()
    for g in (2.0, 1.0, 0.5):
        tr.append(g)
    with pytest.raises(ValueError):
        tr.append(-1.0)
    with pytest.raises(ValueError):
        tr.append(float("nan"))
    assert tr.normalized() == [1.0, 0.5, 0.25]
    tr.to_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "epoch,G,normalized_G"
    assert GradientTrace.from_csv(tmp_path / "g.csv").values == tr.values
