import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from lccan.cli import main


@dataclass
class Run:
    root: Path
    seconds: float

    @property
    def data(self):
        return self.root / "data"

    @property
    def backbone(self):
        return self.root / "backbone"

    @property
    def lcca(self):
        return self.root / "lcca"


def run_pipeline(root) -> Run:
    """gen-data, pretrain, metatrain and eval with the shipped defaults, seed 0, fold 0."""
    t0 = time.perf_counter()
    for cmd in ("gen-data", "pretrain", "metatrain", "eval"):
        assert main([cmd, "--out", str(root), "--seed", "0", "--fold", "0"]) == 0, cmd
    return Run(Path(root), time.perf_counter() - t0)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("reference"))


@pytest.fixture(scope="session")
def reference_models(reference_run):
    from lccan.synthia import load_dataset
    from lccan.training import load_backbone, load_lcca

    net, _ = load_backbone(reference_run.backbone)
    return load_dataset(reference_run.data), net, load_lcca(reference_run.lcca)
