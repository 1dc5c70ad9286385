import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cinessp.phantom import PhantomSpec, generate  # noqa: E402

# reduced network and resolution used throughout; every run stays on CPU
SMALL_UNET = {"n_stages": 4, "base_features": 8, "feature_cap": 32}
SMALL_AUG = {"target_size": [64, 64]}
TINY_BUDGET = {"epochs": 2, "steps_per_epoch": 2, "batch_size": 4}


@pytest.fixture(scope="session")
def phantoms():
    return generate(PhantomSpec(n_subjects=8, slices=4, frames=6, image_size=64, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


GRID_PRETRAIN = {"epochs": 1, "steps_per_epoch": 2, "batch_size": 4, "mask": {"patch_size": [16, 16]},
                 "multicrop": {"n_local": 2, "global_size": [64, 64], "local_size": [32, 32]},
                 "dino": {"out_dim": 64, "hidden_dim": 32, "bottleneck_dim": 16},
                 "projection": {"out_dim": 16, "hidden_dim": 32}}


@pytest.fixture(scope="session")
def grid_run(tmp_path_factory):
    """Cached tiny protocol grids over 16 phantoms (split 8/4/4), two seeds."""
    from cinessp.config import ExperimentConfig
    from cinessp.experiments import dataset_from_volumes, grid

    vols = generate(PhantomSpec(n_subjects=16, slices=3, frames=4, image_size=64, seed=11))
    dataset = dataset_from_volumes(vols, fractions=(0.5, 0.25, 0.25), seed=0)
    root = tmp_path_factory.mktemp("grids")
    cache = {}

    def run(experiment):
        if experiment not in cache:
            cfg = ExperimentConfig(kind="train", seeds=[0], unet=SMALL_UNET, augmentation=SMALL_AUG,
                                   overrides=dict(TINY_BUDGET, epochs=1), output_dir=str(root))
            cache[experiment] = grid(cfg, subjects=(None, 4, 2), seeds=(0, 1), experiment=experiment,
                                     dataset=dataset, pretrain_overrides=GRID_PRETRAIN)
        return cache[experiment]

    return run


# ------------------------------------------------------------- acceptance lines

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.skipped:
        return
    if report.when == "call" or report.failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        number, title = marker.args
        _VERDICTS[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title, detail = _VERDICTS[number]
        line = f"{verdict}  {number:2d}. {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
