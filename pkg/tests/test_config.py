import math

import pytest

from edcapf.config import TABLE1, AcClass, NetworkConfig, ProtocolTimings, burst_size, edca_classes
from edcapf.errors import ConfigError


@pytest.mark.parametrize("kw,field", [
    ({"n": -1}, "classes.A.n"), ({"p": 1.0}, "classes.A.p"), ({"r": 0.0}, "classes.A.r"),
    ({"t": 0}, "classes.A.t"), ({"M": 0}, "classes.A.M"), ({"d": 0.0}, "classes.A.d"),
    ({"cw_min": 0.5}, "classes.A.cw_min"),
])
def test_class_validation(kw, field):
    base = {"name": "A", "n": 1, "p": 0.0, "r": 54.0, "t": 2}
    with pytest.raises(ConfigError) as exc:
        AcClass(**{**base, **kw})
    assert exc.value.field == field


def test_network_validation():
    a = AcClass("A", 1, 0.0, 54.0, 2)
    with pytest.raises(ConfigError):
        NetworkConfig(())
    with pytest.raises(ConfigError):
        NetworkConfig((a, a))
    with pytest.raises(ConfigError):
        NetworkConfig((AcClass("A", 0, 0.0, 54.0, 2),))
    with pytest.raises(ConfigError):
        NetworkConfig((a,), m=-1)


def test_timings_eifs_consistency():
    with pytest.raises(ConfigError) as exc:
        ProtocolTimings(eifs=90.0)
    assert exc.value.field == "timings.eifs"
    assert ProtocolTimings.derived(sifs=10.0).eifs == pytest.approx(38.67 + 10.0 + 34.0)
    assert TABLE1.eifs == pytest.approx(TABLE1.t_ack + TABLE1.sifs + TABLE1.difs)


def test_burst_size():
    assert burst_size(0.0, 54.0, 8000) == 1
    per = 8000 / 54 + 90.67
    assert burst_size(3008.0, 54.0, 8000) == int(3008 // per)
    assert burst_size(1504.0, 36.0, 8000) == int(1504 // (8000 / 36 + 90.67))


def test_edca_defaults():
    ones = dict.fromkeys(("BK", "BE", "VI", "VO"), 1)
    classes = edca_classes(ones, dict.fromkeys(ones, 0.0), dict.fromkeys(ones, 54.0))
    assert [c.t for c in classes] == [7, 3, 2, 2]
    assert [c.M for c in classes] == [1, 1, 12, 6]
    assert all(math.isinf(c.d) for c in classes)


def test_helpers():
    cfg = NetworkConfig((AcClass("A", 1, 0.0, 54.0, 3), AcClass("B", 0, 0.0, 54.0, 2)))
    assert cfg.t_min == 3
    assert cfg.active.tolist() == [True, False]
    assert cfg.with_cw([7, 9]).cw_min.tolist() == [7.0, 9.0]
    assert cfg.replace_class("B", n=2).n.tolist() == [1.0, 2.0]
    assert cfg.replace_class("B", n=2).subset([False, True]).names == ["B"]
    with pytest.raises(ConfigError):
        cfg.index("C")
