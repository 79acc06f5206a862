import json
import os
import pathlib

import pytest


@pytest.fixture
def tiny_config(tmp_path):
    import unlearn_lab

    cfg = unlearn_lab.default_config()
    cfg["synthetic"].update(n_entities=2, forget_per_entity=2, direct_per_entity=2,
                            indirect_per_entity=2, n_general=2, test_per_entity=1,
                            n_test_general=1)
    cfg["model"].update(d_model=16, n_layers=1, n_heads=2, max_seq_len=24)
    cfg["finetune"].update(epochs=10, batch_size=4)
    cfg["unlearn"].update(epochs=1, batch_size=4)
    cfg["output_dir"] = str(tmp_path / "runs")
    cfg["cache_dir"] = str(tmp_path / "cache")
    return cfg


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config))
    return path


@pytest.fixture
def cli():
    path = os.environ.get("UNLEARN_CLI")
    if not path or not pathlib.Path(path).exists():
        pytest.skip("UNLEARN_CLI is not set")
    return path
