import numpy as np
import pytest

from dremlab import sim
from dremlab.tensor import Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            fp = f()
            arr[i] = old - h
            fm = f()
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        err = np.abs(a - n)
        assert np.all(err <= atol + rtol * np.abs(n)), f"max abs err {err.max():.3e}"


def check_module_grads(module, make_loss, inputs=()):
    """Compare backprop against finite differences for every parameter and the given input tensors."""
    params = module.parameters() if module is not None else []
    tensors = list(params) + list(inputs)

    def value():
        return float(make_loss().data)

    for t in tensors:
        t.grad = None
    make_loss().backward()
    analytic = [t.grad for t in tensors]
    numeric = numeric_grad(value, [t.data for t in tensors])
    assert_grads_close(analytic, numeric)


def tracked(rng, shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def env():
    return sim.EnvConfig()


def tiny_experiment(tmp_path, condition="drem", seeds=(0, 1)):
    """Seconds-scale experiment config: 8-pixel images, a shallow tree and a few hundred SAC steps."""
    from dremlab import harness, models, sac, sampler

    return harness.ExperimentConfig(
        env=sim.EnvConfig(image_size=8, ft_history_len=4),
        sampler=sampler.SamplerConfig(M=6),
        arch=models.ArchConfig(
            image_size=8, ft_len=4, latent_dim=6, image_feat=4, ft_feat=3, hidden=5, channels=(2, 3, 2),
            ft_conv_channels=2, ft_conv_layers=2, decoder_channels=(3, 2, 2),
        ),
        sac=sac.SacConfig(
            batch_size=8, initial_random_steps=20, episode_limit=15, eval_interval=30, eval_episodes=2,
            policy_image_size=8, channels=(4, 4, 4), image_feat=8, ft_feat=4, feature_dim=16, hidden=32,
        ),
        condition=condition,
        seeds=seeds,
        output_dir=str(tmp_path),
        name="tiny",
        iters=5,
        pair_count=40,
        total_steps=60,
        batch_size=8,
    )


ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def criterion():
    """Record the one-line verdict for an acceptance criterion."""

    def record(number, passed, detail):
        verdict = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"criterion {number}: {verdict}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
