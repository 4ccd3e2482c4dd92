import pytest
from hypothesis import given, settings, strategies as st

from workbench.data import NoiseSpec
from workbench.engine import PRESETS, RunConfig, instantiate
from workbench.experiment import (DataSpec, Experiment, ExperimentError, load_datasets, parse_experiment,
                                  parse_text, serialize)


def problems_of(text):
    with pytest.raises(ExperimentError) as info:
        parse_text(text)
    return info.value.problems


def test_minimal_file_gets_defaults():
    exp = parse_text("engine.preset = gpl\ndata.kind = two_moons\n")
    assert exp.run == instantiate("gpl", RunConfig())
    assert exp.data == DataSpec()
    assert exp.noise == NoiseSpec("symmetric", 0.4)


def test_empty_file_is_the_documented_defaults():
    assert parse_text("# nothing\n\n") == Experiment()


def test_comments_and_whitespace():
    exp = parse_text("  noise.ratio=0.2   # trailing comment\n# engine.epochs = 3\nengine.epochs =   7\n")
    assert exp.noise.ratio == 0.2 and exp.run.epochs == 7


def test_ratio_out_of_range_cites_line():
    probs = problems_of("data.kind = two_moons\nnoise.ratio = 1.5\n")
    assert len(probs) == 1 and probs[0].startswith("line 2:") and "1.5" in probs[0]


def test_all_problems_reported_together():
    text = ("noise.ratio = 1.5\n"
            "foo.bar = 1\n"
            "engine.preset = spd_ce\n"
            "engine.networks = dual\n"
            "engine.epochs = ten\n"
            "engine.lr = -1\n"
            "this is not an assignment\n"
            "engine.lr = 0.1\n")
    probs = problems_of(text)
    lines = sorted(int(p.split(":")[0].split()[1]) for p in probs)
    assert lines == [1, 2, 3, 5, 6, 7, 8]
    assert any("unknown key foo.bar" in p for p in probs)
    assert any("dual" in p and "spd" in p for p in probs)
    assert any("already set on line 6" in p for p in probs)


def test_type_mismatch():
    assert "expected an integer" in problems_of("engine.batch_size = 6.5\n")[0]
    assert "finite" in problems_of("engine.lr = nan\n")[0]
    assert "one of" in problems_of("selector.kind = coin\n")[0]


def test_explicit_key_beats_preset():
    exp = parse_text("engine.preset = dividemix_plus\nbackbone.lambda_u = 5\n")
    assert exp.run.backbone.kind == "mixmatch" and exp.run.backbone.lambda_u == 5.0


def test_odd_moons_size_rejected():
    assert "data.n" in problems_of("data.n = 101\n")[0]


def test_class_map_parsed_and_checked():
    exp = parse_text("data.kind = mnist\nnoise.kind = asymmetric\nnoise.class_map = 2:7, 3:8\n")
    assert exp.noise.class_map == {2: 7, 3: 8}
    assert problems_of("noise.kind = asymmetric\nnoise.class_map = 0:5\n")[0].startswith("line 2")
    assert problems_of("data.n = 10\nnoise.kind = asymmetric\n")[0].startswith("line 2")  # no map for 2 classes


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_round_trip_every_preset(preset):
    exp = parse_text(f"engine.preset = {preset}\nengine.epochs = 9\nengine.warmup_epochs = 2\nnoise.seed = 4\n")
    assert parse_text(serialize(exp)) == exp


@settings(max_examples=40, deadline=None)
@given(ratio=st.floats(0, 1), lr=st.floats(1e-4, 1.0), epochs=st.integers(0, 500), hidden=st.integers(1, 512),
       thr=st.floats(0.01, 0.99), kind=st.sampled_from(["symmetric", "asymmetric", "none"]),
       forced=st.one_of(st.none(), st.floats(0.5, 1.0)))
def test_round_trip_property(ratio, lr, epochs, hidden, thr, kind, forced):
    text = (f"noise.kind = {kind}\nnoise.class_map = {'0:1,1:0' if kind == 'asymmetric' else 'default'}\n"
            f"noise.ratio = {ratio!r}\nengine.lr = {lr!r}\nengine.epochs = {epochs}\n"
            f"model.hidden = {hidden}\nselector.clean_threshold = {thr!r}\n"
            f"backbone.forced_lambda = {'none' if forced is None else repr(forced)}\n")
    exp = parse_text(text)
    assert parse_text(serialize(exp)) == exp


def test_parse_experiment_reads_file(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("engine.preset = spd_te\n", encoding="utf-8")
    assert parse_experiment(p).run.backbone.kind == "temporal_ensembling"


def test_load_datasets_moons_noise_and_sizes():
    exp = parse_text("data.n = 200\ndata.n_test = 100\nnoise.ratio = 0.25\n")
    train, test = load_datasets(exp)
    assert (train.n, test.n) == (200, 100)
    assert abs((train.given_labels != train.true_labels).mean() - 0.25) < 0.1
    assert (test.given_labels == test.true_labels).all()
