import numpy as np
import pytest

from veforecast.errors import ConfigError, DataError
from veforecast.head import VEHeadConfig, init_ci_head, init_ve_head
from veforecast.models import ModelConfig, create_model
from veforecast.serialize import (
    head_fingerprint,
    head_from_bytes,
    head_to_bytes,
    load_head,
    load_model,
    model_fingerprint,
    model_from_bytes,
    model_to_bytes,
    save_head,
    save_model,
)


def build(backbone, variant, seed=0):
    cfg = ModelConfig(backbone=backbone, L=16, H=4, C=3, variant=variant, k=2, p=1.0)
    return create_model(cfg, np.random.default_rng(seed))


@pytest.mark.parametrize("backbone", ["linear", "dlinear", "fits"])
@pytest.mark.parametrize("variant", ["ci", "vemoe", "vemoe_lora"])
class TestModelRoundTrip:
    def test_params_and_config_survive(self, backbone, variant):
        model = build(backbone, variant)
        loaded = model_from_bytes(model_to_bytes(model))
        assert loaded.config == model.config
        for name, arr in model.params().items():
            assert np.array_equal(loaded.params()[name], arr), name

    def test_forward_agrees_bitwise(self, backbone, variant):
        model = build(backbone, variant)
        loaded = model_from_bytes(model_to_bytes(model))
        x = np.random.default_rng(5).normal(size=(2, 16, 3))
        assert np.array_equal(model.forward(x)[0], loaded.forward(x)[0])

    def test_save_load_save_is_byte_identical(self, backbone, variant):
        model = build(backbone, variant)
        data = model_to_bytes(model)
        assert model_to_bytes(model_from_bytes(data)) == data


class TestModelFiles:
    def test_file_round_trip(self, tmp_path):
        model = build("linear", "vemoe")
        path = tmp_path / "model.vef"
        save_model(path, model)
        loaded = load_model(path)
        assert np.array_equal(loaded.params()["embedding"], model.params()["embedding"])

    def test_dlinear_keeps_one_shared_embedding(self):
        model = build("dlinear", "vemoe")
        loaded = model_from_bytes(model_to_bytes(model))
        assert loaded.trend_head.embedding is loaded.seasonal_head.embedding

    def test_bad_magic_rejected(self):
        with pytest.raises(DataError, match="magic"):
            model_from_bytes(b"NOPE" + b"\x00" * 32)

    def test_head_checkpoint_is_not_a_model(self):
        head = init_ci_head(8, 4, np.random.default_rng(0))
        with pytest.raises(DataError, match="expected a model"):
            model_from_bytes(head_to_bytes(head))


class TestHeadRoundTrip:
    def test_ci_head(self, tmp_path):
        head = init_ci_head(8, 4, np.random.default_rng(1))
        path = tmp_path / "head.vef"
        save_head(path, head)
        loaded = load_head(path)
        assert np.array_equal(loaded.weights, head.weights)

    @pytest.mark.parametrize("mode", ["full", "lora"])
    @pytest.mark.parametrize("domain", ["real", "complex"])
    def test_mixture_head(self, mode, domain):
        cfg = VEHeadConfig(C=5, D=8, H=4, k=3, p=1.0, domain=domain, mode=mode)
        head = init_ve_head(cfg, np.random.default_rng(2))
        loaded = head_from_bytes(head_to_bytes(head))
        assert loaded.config == cfg
        for name, arr in head.params().items():
            assert np.array_equal(loaded.params()[name], arr), name
            assert loaded.params()[name].dtype == arr.dtype

    def test_unknown_object_rejected(self):
        with pytest.raises(ConfigError):
            head_to_bytes(object())


class TestFingerprints:
    def test_stable_for_identical_models(self):
        assert model_fingerprint(build("fits", "vemoe")) == model_fingerprint(
            build("fits", "vemoe")
        )

    def test_sensitive_to_parameters(self):
        a = build("linear", "ci", seed=0)
        b = build("linear", "ci", seed=1)
        assert model_fingerprint(a) != model_fingerprint(b)

    def test_head_fingerprint_tracks_values(self):
        head = init_ci_head(8, 4, np.random.default_rng(1))
        before = head_fingerprint(head)
        head.weights[0, 0] += 1.0
        assert head_fingerprint(head) != before
