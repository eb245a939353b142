import pytest

from nodulegen import analyzer, dataset, net as netmod


@pytest.fixture(scope="session")
def desk_seeds():
    return dataset.synth_seeds(20, rng_seed=2024)


@pytest.fixture(scope="session")
def desk_base(desk_seeds):
    return dataset.augment(desk_seeds)


@pytest.fixture(scope="session")
def desk_stats(desk_seeds):
    return analyzer.compute_seed_stats(analyzer.features_of(desk_seeds))


@pytest.fixture(scope="session")
def tiny_trained():
    """Small trained net for pipeline/cli tests: 6 seeds, short training."""
    seeds = dataset.synth_seeds(6, rng_seed=42)
    base = dataset.augment(seeds)
    net = netmod.init_network([12, 3, 24, 48], seeds.grid_dims, seeds.spacing,
                              rng_seed=42)
    net, _ = netmod.train(net, base, 600, rng_seed=42)
    return net, seeds


def random_grid(rng, dims=(6, 6, 6), density=0.2, spacing=(1.25, 0.7, 0.7)):
    from nodulegen.voxel import VoxelGrid
    vals = (rng.uniform(0.0, 1.0, size=dims) < density).astype(float)
    return VoxelGrid(dims, spacing, vals)
