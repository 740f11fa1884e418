import json
import shutil
import subprocess

import pytest

PHANTOM_SPEC = {
    "phantom": {
        "noise": 0.05,
        "blur_sigma": 1.0,
        "dropout": 0.3,
        "spacing": 2.5,
        "margin_mm": 38.75,  # 32^3 grid at 2.5 mm
        "seed": 0,
    }
}


def synthesize(out_dir, n, seed):
    """Generate phantoms through the segmentation toolkit's CLI."""
    if shutil.which("ssmseg") is None:
        pytest.skip("ssmseg CLI not installed; primary package required for this test")
    spec_path = out_dir / "spec.json"
    spec_path.write_text(json.dumps(PHANTOM_SPEC))
    subprocess.run(
        ["ssmseg", "synth", "--spec", str(spec_path), "--n", str(n),
         "--seed", str(seed), "--out", str(out_dir)],
        check=True, capture_output=True, text=True,
    )
    return out_dir


@pytest.fixture(scope="session")
def one_phantom_dir(tmp_path_factory):
    return synthesize(tmp_path_factory.mktemp("one_phantom"), 1, 9)


@pytest.fixture(scope="session")
def ten_phantom_dir(tmp_path_factory):
    return synthesize(tmp_path_factory.mktemp("ten_phantoms"), 10, 30)
