import numpy as np
import pytest

from kemp.scene import AgentTrack, HorizonSpec, RoadPolyline, Scenario
from kemp.synth import GeneratorConfig, generate


def straight_scenario(scenario_id="s0", speed=10.0, past=11, future=8, dt=0.1, k=0, heading=0.0, origin=(0.0, 0.0)):
    """Noise-free target moving at constant speed along ``heading``."""
    c, s = np.cos(heading), np.sin(heading)
    tp = dt * np.arange(-(past - 1), 1)
    tf = dt * np.arange(1, future + 1)
    px, py = origin[0] + c * speed * tp, origin[1] + s * speed * tp
    past_states = np.column_stack([px, py, np.full(past, c * speed), np.full(past, s * speed),
                                   np.full(past, heading), np.ones(past)])
    future_states = np.column_stack([origin[0] + c * speed * tf, origin[1] + s * speed * tf, np.ones(future)])
    road = RoadPolyline("lane", "lane_center", np.array([[origin[0] - c * 20, origin[1] - s * 20],
                                                         [origin[0] + c * 40, origin[1] + s * 40]]))
    return Scenario(scenario_id, HorizonSpec(past, future, dt, k), "target",
                    (AgentTrack("target", "vehicle", past_states, future_states),), (road,), "straight")


@pytest.fixture
def straight():
    return straight_scenario()


@pytest.fixture(scope="session")
def small_world():
    """40 generated scenarios, T=80 at 10 Hz, k=4."""
    return generate(GeneratorConfig(seed=3, scenario_count=40))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
