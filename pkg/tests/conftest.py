import numpy as np
import pytest

from tacsim import fem, geometry as geo

COARSE_EDGE = 2.4e-3


@pytest.fixture(scope="session")
def coarse_geometry():
    return geo.build_fingertip(geo.FingertipParams(edge_length=COARSE_EDGE))


@pytest.fixture(scope="session")
def material():
    return fem.MaterialParams(mu_nh=2.8e5, t_sk=1.57e-3)


@pytest.fixture(scope="session")
def contact_params():
    return fem.ContactParams(mu_fr=0.186)


@pytest.fixture(scope="session")
def coarse_model(coarse_geometry, material, contact_params):
    anchors = np.union1d(coarse_geometry.skin.node_sets["clamp"],
                         coarse_geometry.skin.node_sets["nail"])
    return fem.MembraneModel(coarse_geometry.skin, material, anchors,
                             contact=contact_params)


@pytest.fixture(scope="session")
def pressurized(coarse_model, coarse_geometry):
    fluid = fem.FluidConstraint(
        v_ref=coarse_model.v_ref - geo.core_volume(coarse_geometry.core),
        t_fl=29.19)
    state, pressures = fem.run_pressurization(coarse_model, fluid,
                                              fem.SolverConfig())
    return state, pressures
