import numpy as np
import pytest

from mmil.bagdata import generate_seven_not_three
from mmil.netcore import build_network
from mmil.train import TrainConfig, train


def random_topbag(rng, d, n_sub=(1, 4), n_inst=(1, 4)):
    return [rng.standard_normal((int(rng.integers(*n_inst)), d)) for _ in range(int(rng.integers(*n_sub)))]


def two_level_arch(units=(8, 8), aggregator="max", activation="relu", head=(), dense=()):
    levels = []
    for i, u in enumerate(units):
        level = {"bags": [{"units": u, "aggregator": a, "activation": activation} for a in aggregator.split("+")]}
        if i == 0 and dense:
            level["dense"] = list(dense)
        levels.append(level)
    return {"levels": levels, "head": list(head)}


@pytest.fixture(scope="session")
def seven_small():
    """Noiseless seven-not-three splits and a network trained on them."""
    train_set, train_latent = generate_seven_not_three(1500, noise_std=0.0, seed=11)
    valid_set, _ = generate_seven_not_three(300, noise_std=0.0, seed=12)
    test_set, test_latent = generate_seven_not_three(600, noise_std=0.0, seed=13)
    spec = build_network(two_level_arch((64, 64)), 10, 2, np.random.default_rng(0))
    result = train(spec, train_set, valid_set, TrainConfig(max_epochs=40, seed=1))
    return {
        "train": train_set, "valid": valid_set, "test": test_set,
        "train_latent": train_latent, "test_latent": test_latent, "spec": result.spec,
    }


def random_small_network(rng, depth=None):
    """A random small network with random biases (so no ReLU sits exactly on its kink)
    and a matching random batch."""
    depth = int(rng.integers(1, 3)) if depth is None else depth
    d, n_classes = int(rng.integers(2, 5)), int(rng.choice([2, 3]))
    levels = []
    for _ in range(depth):
        level = {
            "bags": [
                {
                    "units": int(rng.integers(2, 5)),
                    "aggregator": str(rng.choice(["max", "mean", "sum"])),
                    "activation": str(rng.choice(["relu", "tanh", "linear"])),
                }
                for _ in range(int(rng.integers(1, 3)))
            ]
        }
        if rng.random() < 0.3:
            level["dense"] = [int(rng.integers(2, 4))]
        levels.append(level)
    arch = {
        "levels": levels,
        "head": [3] if rng.random() < 0.5 else [],
        "hidden_activation": str(rng.choice(["relu", "tanh"])),
    }
    spec = build_network(arch, d, n_classes, rng)
    for bias in spec.parameters()[1::2]:
        bias[:] = rng.normal(0.0, 0.5, bias.shape)
    batch = int(rng.integers(1, 4))
    if depth == 2:
        bags = [random_topbag(rng, d) for _ in range(batch)]
    else:
        bags = [rng.standard_normal((int(rng.integers(1, 5)), d)) for _ in range(batch)]
    labels = rng.integers(0, n_classes, batch)
    return spec, bags, labels


# --- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
