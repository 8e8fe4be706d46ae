import numpy as np
import pytest

from macfield.model import INF, ScalingMode, ScenarioError
from macfield.scenarios import REFERENCE, example_document, load_example


def test_example1_parameters(example1):
    assert example1.N == 1200
    assert example1.mode is ScalingMode.RAW
    assert example1.delta == INF
    (c,) = example1.classes
    assert c.K == 12
    expected = [1 / 3200, 1 / 160] + [1.2 ** j / 160 for j in range(1, 12)]
    np.testing.assert_allclose(c.q, expected, rtol=1e-15)


def test_example2_parameters(example2):
    assert example2.N == 1280
    assert example2.delta == 0
    assert example2.class_sizes() == (640, 640)
    h, l = example2.classes
    assert (h.K, l.K) == (20, 20)
    assert h.q[:3] == pytest.approx((1 / 2400, 1 / 480, 0.8 / 40))
    assert h.q[3] == pytest.approx(0.8 ** 2 / 40)
    assert h.q[20] == pytest.approx(0.8 ** 19 / 40)
    assert l.q[0] == pytest.approx(1 / 3840)
    assert set(l.q[1:]) == {1 / 64}


def test_unknown_example():
    with pytest.raises(ScenarioError) as err:
        example_document("example3")
    assert err.value.field == "example"


def test_reference_tables_cover_examples():
    for example_id, ref in REFERENCE.items():
        load_example(example_id)
        assert len(ref["roots"]) == len(ref["classification"])
