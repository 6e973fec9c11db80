import pytest

from semaug.gradcheck import SUITES, TOLERANCE, format_table, run_suite


@pytest.mark.parametrize("name", sorted(SUITES))
def test_suite_passes(name):
    result = run_suite(name, seed=0, instances=3)
    assert result.instances == 3
    assert result.max_rel_error < TOLERANCE, (name, result.max_rel_error)


def test_table_format():
    table = format_table([run_suite("focal_loss", instances=1)])
    assert table.splitlines()[0].split()[:2] == ["suite", "n"]
    assert table.endswith("ok")
