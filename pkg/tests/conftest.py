import numpy as np
import pytest

from linkacq.dictionary import GridConfig, build_template_bank, gram_matrix
from linkacq.harness import ExperimentConfig, ReceiverSpec
from linkacq.waveforms import PulseShape, default_preamble_set

# Toy geometry used throughout: 3 users, length-31 preambles, G = 45 cells,
# W = 66 window samples.  Small enough for dense Gram checks and brute-force
# oracles, large enough to exercise every code path.

TOY_USERS = 3
TOY_DEGREE = 5
TOY_DOPPLER_STEP = 2.5e-2 * 2.0 * np.pi


@pytest.fixture(scope="session")
def toy_pulse():
    return PulseShape(kind="rectangular", chip_duration=1.0, oversampling=2)


@pytest.fixture(scope="session")
def toy_preambles(toy_pulse):
    return default_preamble_set(TOY_USERS, TOY_DEGREE, toy_pulse)


@pytest.fixture(scope="session")
def toy_grid():
    return GridConfig(n_users=TOY_USERS, doppler_half=1, n_delays=5,
                      delay_step=0.5, doppler_step=TOY_DOPPLER_STEP,
                      shift_cells=2, delay_spread=1.0)


@pytest.fixture(scope="session")
def toy_templates(toy_preambles, toy_grid):
    return build_template_bank(toy_preambles, toy_grid)


@pytest.fixture(scope="session")
def toy_gram(toy_templates):
    return gram_matrix(toy_templates, dense=True)


@pytest.fixture(scope="session")
def toy_config():
    return ExperimentConfig(
        n_users=TOY_USERS, n_active=2, paths_per_user=1,
        register_degree=TOY_DEGREE, chip_duration=1.0, oversampling=2,
        doppler_half=1, doppler_step_cycles=2.5e-2, n_delays=5,
        delay_step_chips=0.5, shift_cells=2, delay_spread_chips=1.0,
        trials=100, snr_db=(10.0,), target_pf=0.1, knowledge="partial",
        receivers=(
            ReceiverSpec(name="csa-kl", kind="csa", bank="kl-optimal",
                         n_samplers=20),
            ReceiverSpec(name="dsa", kind="dsa"),
            ReceiverSpec(name="mf", kind="mf"),
        ))
