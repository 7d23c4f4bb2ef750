from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_image(image_id="img", width=300, height=200, labeled=True, tumor_type=None, seed=0):
    from mitocam.dataset import RoiImage

    pixels = np.random.default_rng(seed).integers(0, 256, (height, width, 3), dtype=np.uint8)
    return RoiImage(image_id, pixels, tumor_type, labeled, f"{image_id}.png")


def separable_patches(n_per_class=64, size=64, seed=0, flip_fraction=0.0):
    """Dark patches with a bright square vs. plain dark patches."""
    from mitocam.dataset import Patch, PatchSet

    rng = np.random.default_rng(seed)
    patches = []
    for i in range(2 * n_per_class):
        positive = i % 2 == 0
        px = rng.integers(40, 90, (size, size, 3)).astype(np.uint8)
        if positive:
            r, c = rng.integers(8, size - 24, 2)
            px[r:r + 16, c:c + 16] = rng.integers(200, 255, 3)
        label = "positive" if positive else "negative"
        if flip_fraction and rng.random() < flip_fraction:
            label = "negative" if positive else "positive"
        patches.append(Patch(px, label, f"img{i % 8}", (size / 2, size / 2), "initial"))
    return PatchSet(patches)


# ----- acceptance plumbing -----

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


# every planted center can sit at a window center, and no two share an NMS neighbourhood;
# crowded windows are exercised separately by plant_multi_object_window
FIXTURE_LAYOUT = {"margin": 120, "min_separation": 150.0}
FIXTURE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic_fixture.json"


@pytest.fixture(scope="session")
def fixture_runs(tmp_path_factory):
    """Synthetic fixture, two identical CLI mine-loop runs and held-out inference/evaluation."""
    import json
    import time

    from mitocam.cli import main
    from mitocam.synthetic import FixtureSpec, generate_fixture, write_fixture

    root = tmp_path_factory.mktemp("fixture_runs")
    data = write_fixture(*generate_fixture(FixtureSpec(n_images=20, seed=0, **FIXTURE_LAYOUT)), root / "data")
    heldout = generate_fixture(FixtureSpec(n_images=5, seed=100, unlabeled_fraction=0.0, **FIXTURE_LAYOUT))
    held = write_fixture(*heldout, root / "heldout")

    runs, timings = [], []
    for name in ("run_a", "run_b"):
        t0 = time.perf_counter()
        code = main(["--config", str(FIXTURE_CONFIG), "--workers", "1", "--output", str(root / name),
                     "--log-level", "WARNING", "mine-loop", "--dataset", str(data)])
        timings.append(time.perf_counter() - t0)
        assert code == 0, f"mine-loop {name} exited with {code}"
        runs.append(root / name)

    t0 = time.perf_counter()
    assert main(["--config", str(FIXTURE_CONFIG), "--workers", "1", "--output", str(root / "held_out"),
                 "--log-level", "WARNING", "infer", "--checkpoint", str(runs[0] / "best_checkpoint"),
                 "--dataset", str(held)]) == 0
    assert main(["--config", str(FIXTURE_CONFIG), "--output", str(root / "held_out"), "--log-level", "WARNING",
                 "evaluate", "--dataset", str(held), "--detections", str(root / "held_out" / "detections")]) == 0
    timings[0] += time.perf_counter() - t0
    return {"root": root, "data": data, "heldout": held, "heldout_truth": heldout[2], "runs": runs,
            "timings": timings, "split": json.loads((runs[0] / "split.json").read_text())}
