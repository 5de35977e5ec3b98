import numpy as np
import pytest

from src import ops
from src.build import main
from src.consts import EXIT_OK, EXIT_VERIFY_FAILED
from src.utils.errors import ShapeError
from src.verify import FAULTS, SUITES, inject_fault, run_verify, suite_op_gradients


@pytest.mark.parametrize('name', ['op_gradients', 'model_gradients', 'disc_gradients'])
def test_gradient_suites_pass(name):
    ok, detail = SUITES[name](np.random.default_rng(1))
    assert ok, detail


@pytest.mark.parametrize('fault', list(FAULTS))
def test_injected_faults_are_caught(fault):
    with inject_fault(fault):
        ok, detail = suite_op_gradients(np.random.default_rng(1))
    assert not ok, detail


def test_fault_injection_is_undone():
    original = ops._softmax_backward
    with inject_fault('softmax'):
        assert ops._softmax_backward is not original
    assert ops._softmax_backward is original


def test_run_verify():
    assert run_verify(['ssim', 'ema'])
    with inject_fault('matmul'):
        assert not run_verify(['op_gradients'])


def test_verify_command():
    assert main(['verify', '--suites', 'ema', 'denoising']) == EXIT_OK
    assert main(['verify', '--suites', 'op_gradients', '--inject-fault', 'gelu']) == EXIT_VERIFY_FAILED


def raise_shape_error(rng):
    raise ShapeError('stage 2 got 7x7 tokens')


def test_suite_errors_count_as_failures(monkeypatch):
    monkeypatch.setitem(SUITES, 'broken', raise_shape_error)
    assert not run_verify(['broken'])
    assert main(['verify', '--suites', 'ema', 'broken']) == EXIT_VERIFY_FAILED
