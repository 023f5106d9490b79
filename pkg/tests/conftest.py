import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from spermsdf.data import CellRecord, Label, Manifest
from spermsdf.synth import SynthConfig, generate

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_record(cell_id, patient_id, label=Label.UNFRAGMENTED, path="img.png", **rounds):
    annotations = {"round_1": label, **rounds}
    return CellRecord(cell_id=cell_id, patient_id=patient_id, phase_contrast_path=Path(path),
                      annotations=annotations)


def make_manifest(spec, **kwargs) -> Manifest:
    """``spec`` is a list of (patient_id, label) pairs; cell ids are generated."""
    records = [make_record(f"c{i:05d}", pid, label) for i, (pid, label) in enumerate(spec)]
    return Manifest(tuple(records), **kwargs)


def dark_ellipse(size=96, a=25.0, b=15.0, angle=0.0, center=None, background=190.0, head=70.0,
                 noise=0.0, seed=0):
    from spermsdf.synth import ellipse_mask

    center = center or ((size - 1) / 2, (size - 1) / 2)
    mask = ellipse_mask((size, size), center, a, b, angle)
    img = np.where(mask, head, background).astype(np.float64)
    if noise:
        img += np.random.default_rng(seed).normal(0, noise, img.shape)
    return img, mask


def write_png(path, array):
    Image.fromarray(np.clip(np.rint(array), 0, 255).astype(np.uint8)).save(path)
    return Path(path)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 6-patient synthetic dataset shared by the slower tests."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = SynthConfig(n_patients=6, cells_per_patient=12, seed=3, morphology_effect=2.0)
    manifest = generate(cfg, out)
    return out, manifest


@pytest.fixture
def manifest_file(tmp_path):
    """A three-record manifest with real images on disk."""
    lines = [json.dumps({"pixel_scale_um": 0.1, "primary_round": "round_1"})]
    for i, (pid, lab) in enumerate([("A", "fragmented"), ("A", "unfragmented"), ("B", "null")]):
        img, _ = dark_ellipse(a=20 + i, b=12)
        write_png(tmp_path / f"cell{i}.png", img)
        lines.append(json.dumps({"cell_id": f"cell{i}", "patient_id": pid, "phase_contrast": f"cell{i}.png",
                                 "annotations": {"round_1": lab}}))
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path
