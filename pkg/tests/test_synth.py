import hashlib
import json

import numpy as np
import pytest
from scipy.stats import binom

from spermsdf.data import class_counts, filter_supervised, load_manifest
from spermsdf.morphometry import CalibrationConfig, extract_batch, measure, read_image
from spermsdf.synth import SynthConfig, draw_geometry, generate, render_phase_contrast


def digest(directory):
    h = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(directory).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth7")
    return out, generate(SynthConfig(n_patients=20, cells_per_patient=30, frag_prevalence=0.4, seed=7), out)


def test_counts_within_binomial_band(cohort):
    out, manifest = cohort
    assert len(manifest) == 600 and len(manifest.patients) == 20
    unfrag, frag, null = class_counts(manifest)
    lo, hi = binom.ppf([0.005, 0.995], 600, 0.4)
    assert lo <= frag <= hi
    assert unfrag + frag == 600 and null == 0


def test_manifest_on_disk_validates(cohort):
    out, manifest = cohort
    loaded = load_manifest(out / "manifest.jsonl")
    assert [r.cell_id for r in loaded.records] == [r.cell_id for r in manifest.records]
    assert loaded.pixel_scale_um == 0.1 and loaded.rounds == ["round_1", "round_2"]
    assert all(r.phase_contrast_path.exists() and r.fluorescence_path.exists() for r in loaded.records)
    assert json.loads((out / "synth_config.json").read_text())["seed"] == 7


def test_second_round_disagreement_rate(cohort):
    _, manifest = cohort
    differ = np.mean([r.annotations["round_1"] != r.annotations["round_2"] for r in manifest.records])
    assert 0.05 < differ < 0.15


def test_deterministic_given_seed(tmp_path):
    cfg = SynthConfig(n_patients=2, cells_per_patient=4, seed=5)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    generate(SynthConfig(n_patients=2, cells_per_patient=4, seed=6), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_null_fraction(tmp_path):
    m = generate(SynthConfig(n_patients=4, cells_per_patient=25, null_fraction=0.3, seed=1), tmp_path)
    assert 15 <= class_counts(m)[2] <= 45
    assert len(filter_supervised(m)) == 100 - class_counts(m)[2]


def test_measure_recovers_drawn_axes():
    cfg = SynthConfig(seed=0)
    rng = np.random.default_rng(0)
    calib = CalibrationConfig(pixel_scale_um=cfg.pixel_scale_um)
    for i in range(60):
        geom = draw_geometry(rng, fragmented=bool(i % 2), cfg=cfg)
        geom = type(geom)(geom.length_um, geom.width_um, geom.angle, geom.center, 0.0)
        f = measure(render_phase_contrast(geom, cfg, rng), calib)
        assert f.head_length_um == pytest.approx(geom.length_um, rel=0.05)
        assert f.head_width_um == pytest.approx(geom.width_um, rel=0.05)


def test_morphology_effect_separates_classes(cohort):
    out, manifest = cohort
    table = extract_batch(manifest)
    assert table.n_failed == 0
    labels = np.array([manifest_label(manifest, cid) for cid in table.cell_ids])
    length = table.values[:, 0]
    assert length[labels == 1].mean() < length[labels == 0].mean() - 0.4


def manifest_label(manifest, cell_id):
    rec = next(r for r in manifest.records if r.cell_id == cell_id)
    return rec.label("round_1").code


@pytest.mark.parametrize("bad", [dict(frag_prevalence=0.0), dict(morphology_effect=-1), dict(n_patients=0),
                                 dict(image_size=8)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown synth config keys"):
        SynthConfig.from_json({"patients": 3})


def test_png_is_8bit_grayscale(cohort):
    _, manifest = cohort
    img = read_image(manifest.records[0].phase_contrast_path)
    assert img.ndim == 2 and img.max() <= 255
