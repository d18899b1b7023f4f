import pytest

from forgecam.cli import main


@pytest.fixture(scope="session")
def tiny_sets(tmp_path_factory):
    """Small procedural copy-move and inpaint datasets built through the CLI."""
    root = tmp_path_factory.mktemp("tiny")
    for kind, seed in (("copy_move", 7), ("inpaint", 8)):
        rc = main(["synth", "--procedural", "--count", "16", "--kind", kind, "--seed", str(seed),
                   "--out", str(root / kind)])
        assert rc == 0
    return root



@pytest.fixture(scope="session")
def chance_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("chance")
    assert main(["synth", "--procedural", "--count", "200", "--kind", "copy_move", "--seed", "11",
                 "--out", str(root)]) == 0
    return root / "manifest.jsonl"
