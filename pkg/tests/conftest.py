import warnings

import pytest

from diffattn.config import ExperimentConfig
from diffattn.data import synth_dataset


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("synth"), 8, 64, 64, seed=0, splits={"train": 0.75, "val": 0.25})


@pytest.fixture
def tiny_cfg(synth_root, tmp_path):
    """Toy config shrunk further so a training step takes a few milliseconds."""
    cfg = ExperimentConfig.toy(root=str(synth_root))
    cfg.model.encoder.C_e = 8
    cfg.model.unet_width = 8
    cfg.model.t_dim = 32
    cfg.model.llm_width = 16
    cfg.model.llm_heads = 2
    cfg.optim.batch_size = 2
    cfg.optim.log_every = 0
    cfg.diffusion.T_e = 3
    cfg.run.out_dir = str(tmp_path / "run")
    return cfg


@pytest.fixture(autouse=True)
def _quiet_empty_gt():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield
