import pytest

from airdist.config import RunConfig
from airdist.synth import SyntheticScenario, write_scenario

# coarse settings that keep a full pipeline run to a few seconds
SMALL = dict(
    mesh_edge_m=15000.0,
    bau_cell_m=5000.0,
    frk_basis_counts=[30, 10, 4],
    mqsr_alphas="0.05:0.95:0.05",
    support_spacing_m=2500.0,
)


def small_config(paths, out_dir, **kw) -> RunConfig:
    return RunConfig(
        measurements_csv=paths["measurements"],
        registry_csv=paths["registry"],
        boundary_geojson=paths["boundary"],
        municipalities_geojson=paths["municipalities"],
        altitude_asc=paths["altitude"],
        output_dir=str(out_dir),
        **{**SMALL, **kw},
    ).validate()


@pytest.fixture(scope="session")
def small_scenario(tmp_path_factory):
    scen = SyntheticScenario(n_stations=40, n_samples=300, n_municipalities=(3, 3), seed=3)
    root = tmp_path_factory.mktemp("scenario")
    return scen, write_scenario(scen, root), root
