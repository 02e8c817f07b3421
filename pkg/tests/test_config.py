import pytest

from cafusion.config import ConfigError, ModelConfig, TrainConfig, from_dict, to_dict


def test_defaults_are_the_full_scale_setup():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size_train, c.batch_size_eval, c.epochs) == (1e-4, 128, 1, 30)
    assert (c.beta1, c.beta2, c.epsilon, c.pad_sigma) == (0.9, 0.999, 1e-8, 0.01)
    m = c.model
    assert (m.d_model, m.d_global, m.heads, m.n_concepts, m.k) == (256, 768, 8, 30, 5)
    assert (m.fusion_dropout, m.classifier_dropout, m.attention_scale) == (0.1, 0.7, "sqrt_n")


def test_round_trip_through_dict():
    c = TrainConfig(epochs=4, model=ModelConfig(k=2, variant="concat1"))
    assert from_dict(TrainConfig, to_dict(c)) == c


@pytest.mark.parametrize("changes", [
    {"epochs": 0}, {"learning_rate": 0.0}, {"split_ratio": 1.0}, {"batch_size_train": 0},
    {"variant": "concat3"}, {"heads": 3}, {"k": 31}, {"classifier_dropout": 1.0},
    {"fusion_residual": "both"}, {"attention_scale": "sqrt_d"},
])
def test_rejected(changes):
    with pytest.raises(ConfigError):
        TrainConfig().replace(**changes)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown TrainConfig keys: nope"):
        from_dict(TrainConfig, {"nope": 1})
    with pytest.raises(ConfigError, match="unknown ModelConfig keys"):
        from_dict(TrainConfig, {"model": {"depth": 2}})


def test_slots_per_variant():
    m = ModelConfig(n_concepts=4, k=4)
    assert {v: ModelConfig(n_concepts=4, k=4, variant=v).slots
            for v in ("ours", "concat1", "concat2", "avg_sum", "local_only", "global_only")} == {
        "ours": 4, "concat1": 5, "concat2": 4, "avg_sum": 1, "local_only": 4, "global_only": 1}
    assert ModelConfig(n_concepts=4, k=4, variant="avg_sum").effective_k == 1
    assert m.effective_k == 4
