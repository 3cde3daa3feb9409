import pytest

from pointfuse.config import ConfigError, apply_overrides, flatten, load_kv, parse_kv, parse_sets
from pointfuse.experiments import ExperimentConfig


def test_parse_kv_comments_and_errors():
    assert parse_kv("# header\nsteps = 10  # inline\n\nmodel.lr=0.01\n") == {"steps": "10", "model.lr": "0.01"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_kv("steps 10\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv("a = 1\na = 2\n")


def test_nested_overrides_are_typed():
    cfg = apply_overrides(
        ExperimentConfig(),
        {
            "steps": "12",
            "model.lr": "0.01",
            "model.fusion": "ungated",
            "model.bins.bin_size": "0.25",
            "scene.n_distractors": "1, 3",
            "illumination": "3:5, 0.3:5",
            "consistency.upsilons": "0.2, 0.4",
        },
    )
    assert cfg.steps == 12 and cfg.model.lr == 0.01 and cfg.model.fusion == "ungated"
    assert cfg.model.bins.bin_size == 0.25
    assert cfg.scene.n_distractors == (1, 3)
    assert cfg.illumination == ((3.0, 5.0), (0.3, 5.0))
    assert cfg.consistency.upsilons == (0.2, 0.4)


@pytest.mark.parametrize(
    "overrides",
    [{"nope": "1"}, {"model.nope": "1"}, {"steps": "ten"}, {"model": "x"}, {"model.fusion": "late"}, {"steps.x": "1"}],
)
def test_bad_overrides_rejected(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), overrides)


def test_load_and_sets(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n_train = 4\n")
    assert load_kv(p) == {"n_train": "4"}
    with pytest.raises(ConfigError):
        load_kv(tmp_path / "missing.cfg")
    assert parse_sets(["a=1", "b.c = x"]) == {"a": "1", "b.c": "x"}
    with pytest.raises(ConfigError):
        parse_sets(["novalue"])


def test_flatten_roundtrips_through_overrides():
    base = ExperimentConfig()
    flat = flatten(base)
    assert flat["model.bins.num_heading_bins"] == 12
    def as_text(v):
        if isinstance(v, list):
            return ", ".join(":".join(map(str, x)) if isinstance(x, tuple) else str(x) for x in v)
        return str(v)

    text = {k: as_text(v) for k, v in flat.items() if v is not None and v != []}
    assert apply_overrides(base, text) == base
