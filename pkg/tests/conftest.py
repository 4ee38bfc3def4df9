import numpy as np
import pytest

from interseg import data as data_mod
from interseg import train as train_mod
from interseg.models import Model, ModelConfig
from interseg.nn import ParamRegistry


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(variant, seed=0, base_channels=8, depth=3, **kwargs):
    cfg = ModelConfig(variant=variant, depth=depth, base_channels=base_channels, **kwargs)
    reg = ParamRegistry(seed=seed)
    return Model(cfg, reg), reg


@pytest.fixture(scope="session")
def overfit_unet(tmp_path_factory):
    """A small network driven to near-zero loss on four easy samples.

    Shared by the evaluation and CLI tests that need a model which
    actually segments its own training data.
    """
    out = tmp_path_factory.mktemp("overfit_unet")
    spec = data_mod.SynthSpec(count=4, height=32, width=32, noise_std=0.0,
                              intensity_fg=1.0, intensity_bg=0.0,
                              large_radius_px=(5, 7))
    samples = data_mod.generate(spec, seed=77)
    data_mod.save_dataset(samples, out / "data")
    dsplit = data_mod.DatasetSplit(train=[0, 1, 2, 3], val=[0, 1, 2, 3], test=[0, 1, 2, 3])
    model, _ = tiny_model("unet", seed=3, base_channels=8, depth=3)
    from interseg.losses import LossWeights
    tcfg = train_mod.TrainConfig(lr0=1e-3, decay_factor=1.0, max_epochs=400,
                                 batch_size=4, seed=5, early_stop_patience=400,
                                 stop_below_train_loss=0.02,
                                 loss_weights=LossWeights(beta=0.0))
    report = train_mod.train(model, samples, dsplit, tcfg, out_dir=out / "run")
    return {"model": model, "samples": samples, "split": dsplit,
            "report": report, "dir": out}
