import pytest

from irab.scenes import SceneSpec, generate_scenes, split_dataset, write_dataset


@pytest.fixture(scope="session")
def tiny_split():
    spec = SceneSpec()
    split = split_dataset(generate_scenes(14, 0, spec), 6, 4, 4, 1)
    split.spec = spec
    return split


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_split):
    root = tmp_path_factory.mktemp("data")
    write_dataset(tiny_split, root)
    return root


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
