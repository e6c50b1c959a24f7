"""Parity between the compiled kernels and the numpy fallback."""

import numpy as np
import pytest

from promix import backend
from promix import _kernels_py


def _compiled_or_skip():
    try:
        return backend._load("compiled")
    except ImportError:
        pytest.skip("compiled backend not built")


class TestSoftmaxRows:
    def test_backends_agree(self):
        compiled = _compiled_or_skip()
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.uniform(-300, 300, (int(rng.integers(1, 40)), int(rng.integers(2, 30))))
            np.testing.assert_allclose(
                compiled.softmax_rows(z), _kernels_py.softmax_rows(z), rtol=1e-13, atol=1e-300
            )

    def test_rows_sum_to_one(self):
        compiled = _compiled_or_skip()
        rng = np.random.default_rng(1)
        z = rng.uniform(-200, 200, (64, 16))
        np.testing.assert_allclose(compiled.softmax_rows(z).sum(axis=1), 1.0, atol=1e-12)

    def test_overflow_safety(self):
        for kernels in (_kernels_py, _compiled_or_skip()):
            probs = kernels.softmax_rows(np.array([[1e4, 0.0]]))
            assert np.all(np.isfinite(probs))
            assert probs[0, 0] == 1.0


class TestPromptStep:
    def test_backends_agree(self):
        compiled = _compiled_or_skip()
        rng = np.random.default_rng(2)
        for _ in range(20):
            b, c = int(rng.integers(1, 40)), int(rng.integers(2, 30))
            s = rng.uniform(-1, 1, (b, c))
            y = rng.integers(0, c, b).astype(np.int64)
            tau = float(rng.choice([1.0, 0.1, 0.01]))
            w = float(rng.choice([0.0, 5.0]))
            loss_c, grad_c = compiled.prompt_step(s, y, tau, w)
            loss_p, grad_p = _kernels_py.prompt_step(s, y, tau, w)
            assert loss_c == pytest.approx(loss_p, rel=1e-13)
            np.testing.assert_allclose(grad_c, grad_p, rtol=1e-12, atol=1e-300)

    def test_matches_per_sample_gradient(self):
        from promix.losses import grad_prompt_loss

        for kernels in (_kernels_py, _compiled_or_skip()):
            rng = np.random.default_rng(3)
            s = rng.uniform(-1, 1, (8, 5))
            y = rng.integers(0, 5, 8).astype(np.int64)
            _, grad = kernels.prompt_step(s, y, 0.1, 5.0)
            per = np.stack([grad_prompt_loss(s[i], int(y[i]), 0.1, 5.0) for i in range(8)])
            np.testing.assert_allclose(grad, per / 8, rtol=1e-10)


class TestSelection:
    def test_set_backend_round_trip(self):
        original = backend.active_name()
        previous = backend.set_backend("python")
        assert previous == original
        assert backend.active_name() == "python"
        backend.set_backend(original)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown backend"):
            backend.set_backend("fortran")
