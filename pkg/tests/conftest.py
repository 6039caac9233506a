from __future__ import annotations

import pytest

from cloudguard.replay import BaselineConfig, replay_run, scenario_for
from cloudguard.scenario import InventorySpec


@pytest.fixture(scope="session")
def desk_spec() -> InventorySpec:
    return InventorySpec(node_count=50, seed=0)


@pytest.fixture(scope="session")
def desk_scenario(desk_spec):
    """Inventory plus 14 x 20 labels at desk scale."""
    return scenario_for(desk_spec, 20)


@pytest.fixture(scope="session")
def desk_runs(desk_scenario):
    inv, labels = desk_scenario
    return {c.value: replay_run(inv, labels, c, run_id=c.value) for c in BaselineConfig}
