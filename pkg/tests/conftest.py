"""Session fixtures for the desk-scale experiment.

Building the long-tail world and the 20-epoch stage-1 checkpoint costs about
a minute, so they are trained once per session and shared read-only. Only
the acceptance tests request them; the unit-test modules keep their own
small worlds.
"""

import dataclasses
import time

import pytest

from lfsl.bevgrid import GridSpec, voxelize
from lfsl.model import ArchSpec, init_model, save_checkpoint
from lfsl.synthgen import default_world, generate_dataset
from lfsl.train import TrainConfig, run_stage

DESK_GRID = GridSpec(19.2, 19.2, 0.48)
DESK_SEED = 0
DESK_SCORE_FLOOR = 0.05
DESK_IGNORE_RADIUS = 0.96


def desk_world_spec():
    """Long-tail world sized for CPU minutes: >= 600 train frames, 4+2 classes."""
    spec = default_world(seed=DESK_SEED, n_scenes=400, novel_weight=28.0)
    return dataclasses.replace(spec, frames_per_instance=(1, 3),
                               extent=(19.2, 19.2), density_scale=550.0)


def desk_arch(table):
    return ArchSpec(in_channels=5, extractor=(16, 16), shared=16,
                    head_hidden=16,
                    base_heads=tuple((i,) for i in table.base_ids))


def desk_base_config():
    return TrainConfig(stage="base", grid=DESK_GRID, epochs=20,
                       seed=DESK_SEED, ignore_radius=DESK_IGNORE_RADIUS)


@pytest.fixture(scope="session")
def desk_dataset():
    return generate_dataset(desk_world_spec())


@pytest.fixture(scope="session")
def desk_val_grids(desk_dataset):
    """Voxelized validation frames, shared by every checkpoint evaluation."""
    return [(f.frame_id, voxelize(f, DESK_GRID)) for f in desk_dataset.val_frames]


@pytest.fixture(scope="session")
def desk_base(desk_dataset, tmp_path_factory):
    """Stage-1 model trained on base classes, plus its wall time and file."""
    model = init_model(desk_arch(desk_dataset.class_table), seed=DESK_SEED)
    start = time.time()
    model, log = run_stage(model, desk_dataset, desk_base_config())
    seconds = time.time() - start
    path = tmp_path_factory.mktemp("desk") / "base.lfsm"
    save_checkpoint(model, str(path))
    return {"model": model, "path": str(path), "seconds": seconds,
            "log": log}
