import numpy as np
import pytest
from colors import strip_color

from revlm.blocks import ModelConfig
from revlm.engine import GradientBundle
from revlm.model import init_model
from revlm.verify import Check, SuiteReport, compare_gradients, grad_check, invert_check, random_batch


def test_random_batch(midpoint_model):
    tokens, targets = random_batch(midpoint_model, 32, 3, seed=1)
    assert tokens.shape == targets.shape == (3, 8)
    assert np.array_equal(tokens[:, 1:], targets[:, :-1])
    again, _ = random_batch(midpoint_model, 32, 3, seed=1)
    assert np.array_equal(tokens, again)


def test_invert_check_passes(reversible_model):
    tokens, _ = random_batch(reversible_model, 8, 2, seed=0)
    report = invert_check(reversible_model, tokens)
    assert report.passed, report.format()
    assert len(report.checks) == 1 + reversible_model.config.layers + 1
    assert [c.layer for c in report.checks if c.layer is not None] == [3, 2, 1, 0]


@pytest.mark.parametrize('kind', ['midpoint', 'midpoint_a', 'leapfrog', 'hamiltonian', 'retrofit'])
@pytest.mark.parametrize('seed', [0, 4])
def test_invert_check_float32_deep_model(kind, seed):
    config = ModelConfig(vocab_size=64, context_length=32, width=64, heads=4, layers=16,
                         block_kind=kind, dtype='float32')
    model = init_model(config, seed)
    tokens, _ = random_batch(model, 32, 2, seed=seed)
    report = invert_check(model, tokens)
    assert report.passed, report.format()
    assert max(c.measured for c in report.checks) <= 1e-5


def test_invert_check_detects_corruption(midpoint_model):
    tokens, _ = random_batch(midpoint_model, 8, 2, seed=0)
    report = invert_check(midpoint_model, tokens, corrupt=1e-3)
    assert not report.passed
    assert report.failures()
    assert "check(s) failed" in strip_color(report.format())


@pytest.mark.parametrize('kind', ['baseline', 'midpoint', 'hamiltonian'])
def test_grad_check_passes(make_model, kind):
    model = make_model(kind, layers=2)
    tokens, targets = random_batch(model, 8, 2, seed=0)
    report = grad_check(model, tokens, targets)
    assert report.passed, report.format()
    names = [c.name for c in report.checks]
    assert "stored gradients vs finite differences" in names
    assert ("reversible vs stored gradients" in names) == model.config.reversible


def test_grad_check_skips_finite_differences_in_float32(make_model):
    model = make_model('midpoint', layers=2, dtype='float32')
    tokens, targets = random_batch(model, 8, 2, seed=0)
    report = grad_check(model, tokens, targets)
    assert [c.name for c in report.checks] == ["reversible vs stored gradients"]


def test_compare_gradients(midpoint_model):
    a = GradientBundle.zeros_like(midpoint_model)
    b = GradientBundle.zeros_like(midpoint_model)
    assert compare_gradients(a, b)[0] == 0.0
    b.blocks[2].w_v[0, 0] = 1.0
    assert compare_gradients(a, b) == (1.0, 'layers.2.w_v')


def test_check_formatting():
    passed = Check("logits", 1e-12, 1e-10)
    failed = Check("state before layer 2", 1e-3, 1e-10, layer=2)
    broken = Check("reconstruction", np.inf, 1e-10, detail="layer 1: diverged")
    assert passed.passed and not failed.passed and not broken.passed
    assert strip_color(str(passed)) == "PASS logits: 1.000e-12 (tolerance 1.0e-10)"
    assert strip_color(str(broken)).endswith("layer 1: diverged")
    report = SuiteReport("suite", [passed, failed])
    assert report.failures() == [failed]
    lines = strip_color(report.format()).splitlines()
    assert lines[0] == "suite"
    assert lines[-1] == "  1 check(s) failed"
