import numpy as np
import pytest

from nearps.renderer import Material, QuantizationSpec, render_scene
from nearps.scenes import far_field_lights, ring_lights, sphere_scene

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record a one-line acceptance verdict: ``criterion("A1", ok, "details")``."""

    def record(name, ok, detail):
        _CRITERIA[name] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def sphere():
    return sphere_scene()


def _render(scene, lights):
    return render_scene(scene.camera, scene.depth, scene.normals, Material((0.6, 0.5, 0.4)),
                        lights, quant=QuantizationSpec(65536))


@pytest.fixture(scope="session")
def near_images(sphere):
    lights = ring_lights()
    return lights, _render(sphere, lights)


@pytest.fixture(scope="session")
def far_images(sphere):
    lights = far_field_lights(ring_lights(), [0.0, 0.0, 0.30])
    return lights, _render(sphere, lights)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
