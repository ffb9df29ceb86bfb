import json
from pathlib import Path

import pytest

from videotcav.cli import main

# criterion number -> (verdict, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, "PASS" if passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{verdict} criterion {number} {name}: {detail}")


EXPERIMENT_L2 = 1e4


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Synthetic corpus, trained model, mined concepts and a random pool, built via the CLI."""
    root = tmp_path_factory.mktemp("workspace")
    steps = [
        ["synth", "--seed", "0", "--out", str(root / "data")],
        ["synth", "--kind", "scenes", "--seed", "1", "--n", "30", "--out", str(root / "scenes")],
        ["synth", "--kind", "random", "--seed", "2", "--n", "960", "--out", str(root / "pool")],
        ["train", "--corpus", str(root / "data" / "manifest.json"), "--seed", "0", "--out", str(root / "model")],
        [
            "concepts", "--video-dir", str(root / "scenes" / "videos"),
            "--detections-dir", str(root / "scenes" / "detections"),
            "--classes", "person", "--out", str(root / "concepts"),
        ],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    config = {
        "model": "model",
        "corpus": "data/manifest.json",
        "concepts": "concepts/manifest.json",
        "random_pool": "pool/manifest.json",
        "layers": ["stage1", "stage2", "stage3"],
        "target_class": "right",
        "seeds": {"data": 0, "cav": 0, "sampling": 0},
        "l2": EXPERIMENT_L2,
        "cache_dir": "cache",
        "out_dir": "results",
    }
    (root / "config.json").write_text(json.dumps(config, indent=1))
    return Path(root)
