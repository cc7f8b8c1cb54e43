"""Smoke test for the attndb Python extension.

Builds the extension with cargo unless ATTNDB_PY_LIB points at an already built
library, then trains and evaluates a tiny synthetic concept on the toy backend.

    python3 python/smoke_test.py
"""

import importlib.util
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_extension():
    lib = os.environ.get("ATTNDB_PY_LIB")
    if lib is None:
        subprocess.run(["cargo", "build", "--release", "-p", "attndb-py"], cwd=ROOT, check=True)
        suffix = {"darwin": "dylib", "win32": "dll"}.get(sys.platform, "so")
        prefix = "" if sys.platform == "win32" else "lib"
        lib = ROOT / "target" / "release" / f"{prefix}attndb_py.{suffix}"
    staged = Path(tempfile.mkdtemp()) / "attndb_py.so"
    shutil.copy(lib, staged)
    spec = importlib.util.spec_from_file_location("attndb_py", staged)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    adb = load_extension()

    schedule = adb.default_schedule()
    assert [(s["learning_rate"], s["steps"]) for s in schedule] == [(1e-3, 60), (2e-5, 100), (2e-6, 500)]
    assert adb.baseline_plan()[0]["steps"] == 660
    suite = adb.load_prompt_suite()
    assert len(suite) == 24 and suite[0] == "a photo of a [V] [category]"
    assert adb.render_prompt(suite[1], "[V]", "dog") == "a photo of a [V] dog in Times Square"

    # One 1x2 layer, three tokens; concept is token 0, category token 1.
    layer = (1, 2, 3, [0.5, 0.3, 0.2, 0.1, 0.6, 0.3])
    mean, var = adb.pooled_stats([layer], 0)
    assert math.isclose(mean, 0.3) and math.isclose(var, 0.04)
    loss, grads = adb.attention_reg_loss([layer], 0, 1, 2.0, 5.0)
    assert math.isclose(loss, 2.0 * (0.3 - 0.45) ** 2 + 5.0 * (0.04 - 0.0225) ** 2)
    assert len(grads) == 1 and len(grads[0]) == 6

    try:
        adb.RunConfig.from_toml("output_dir = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed config accepted")

    with tempfile.TemporaryDirectory() as tmp:
        adb.synth_concept(tmp, count=3, size=16)
        config = adb.RunConfig.load(os.path.join(tmp, "run.toml"))
        config.set(pretrain_steps=20, images_per_prompt=1, sampling_steps=3)
        for stage in ("1", "2", "3"):
            config.set_stage(stage, steps=3, batch_size=2)
        config.save(os.path.join(tmp, "run.toml"))

        summary = adb.train(os.path.join(tmp, "run.toml"), seed=7)
        assert summary["seed"] == 7
        assert [s["stage"] for s in summary["stages"]] == ["stage1", "stage2", "stage3"]
        report = adb.evaluate(os.path.join(tmp, "run"))
        assert len(report["per_prompt"]) == 24
        assert -1.0 <= report["identity"] <= 1.0

    print("python smoke test passed")


if __name__ == "__main__":
    main()
