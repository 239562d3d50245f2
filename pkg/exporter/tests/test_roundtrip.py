"""Cross-component acceptance: exporter files feed the registration pipeline.

These tests import the consuming pipeline (retinareg) but talk to it only
through the DFMP interchange format.
"""

from pathlib import Path

import numpy as np
import pytest

from dfmp_exporter import ExporterConfig, export_feature_map, make_toy_model, save_model

retinareg = pytest.importorskip("retinareg")

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures" / "dfmp"


@pytest.fixture(scope="module")
def synth_pair(tmp_path_factory):
    from retinareg.dataset import HomographyMagnitude, ModalityTransform, SynthConfig, synth_generate
    from retinareg.imageio import save_image

    tmp = tmp_path_factory.mktemp("pair")
    mt = ModalityTransform(label="CF", gamma=1.0, blur_sigma=0.3, noise_sigma=0.005)
    cfg = SynthConfig(seed=8, size=256, side_a=mt, side_b=mt,
                      homography=HomographyMagnitude(5.0, (0.97, 1.03), 12.0, 5e-6))
    pair = synth_generate(cfg)
    save_image(pair.img_a, tmp / "a.png")
    save_image(pair.img_b, tmp / "b.png")
    save_model(make_toy_model(seed=0), tmp / "model.npz")
    return tmp, pair


class TestRoundTrip:
    def test_bit_exact_load_in_pipeline(self, synth_pair):
        tmp, _ = synth_pair
        cfg = ExporterConfig(model_path=str(tmp / "model.npz"))
        det, desc = export_feature_map(tmp / "a.png", cfg, tmp / "a.dfmp")
        fm = retinareg.load_feature_map(tmp / "a.dfmp")
        assert fm.stride == 4
        assert np.array_equal(fm.detector_logits, det)
        assert np.array_equal(fm.descriptors, desc)

    def test_registers_synthetic_pair_ok(self, synth_pair):
        tmp, pair = synth_pair
        cfg = ExporterConfig(model_path=str(tmp / "model.npz"))
        export_feature_map(tmp / "a.png", cfg, tmp / "a.dfmp")
        export_feature_map(tmp / "b.png", cfg, tmp / "b.dfmp")
        fa = retinareg.load_feature_map(tmp / "a.dfmp")
        fb = retinareg.load_feature_map(tmp / "b.dfmp")
        result = retinareg.register_pair(fa, fb, retinareg.PipelineConfig(seed=0))
        assert result.status is retinareg.RegistrationStatus.OK
        assert result.num_inliers >= 10
        print(f"[acceptance] PASS exporter round trip: status OK, "
              f"{result.num_inliers} inliers of {len(result.matches)} matches")

    def test_register_through_cli_file_backend(self, synth_pair, tmp_path):
        from retinareg.cli import main as rcli
        tmp, _ = synth_pair
        code = rcli(["register", str(tmp / "a.dfmp"), str(tmp / "b.dfmp"),
                     "--seed", "0", "--out", str(tmp_path / "reg")])
        assert code == 0

    def test_shared_fixture_corpus(self):
        fixtures = sorted(FIXTURES.glob("*.dfmp"))
        assert fixtures, "fixture corpus missing"
        for path in fixtures:
            fm = retinareg.load_feature_map(path)
            assert fm.descriptor_dim >= 2
