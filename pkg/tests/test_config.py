from pathlib import Path

import pytest

from lntune.accounting import PRESETS
from lntune.config import (
    ExperimentConfig,
    ValidationError,
    load_experiment,
    load_sweep,
    parse_experiment,
    render_experiment,
)
from lntune.errors import ConfigError
from lntune.train import LN_LR_PRIORITY

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_minimal_file_uses_defaults():
    cfg = parse_experiment("[method]\nmethod = ln\n")
    assert cfg.shape == PRESETS["desk-base"] and cfg.shape_name == "desk-base"
    assert cfg.train.lr_priority == LN_LR_PRIORITY
    assert (cfg.task.shift, cfg.task.shift_strength, cfg.task.label_rule) == ("token", 0.5, "and")
    assert cfg.seeds == [0, 1, 2]


def test_full_file(tiny_config):
    cfg = load_experiment(tiny_config("mam", "prefix_len = 2\nbottleneck = 3\nadd_ln = true\n"))
    assert cfg.method.name == "mam+ln"
    assert cfg.shape.num_layers == 2 and cfg.shape_name == "custom"
    assert cfg.pretrain.corpus_size == 64 and cfg.pretrain.config.epochs == 1
    assert cfg.name == "tiny" and cfg.repeats == 2


def test_ablation_keys():
    cfg = parse_experiment("[method]\nmethod = ln\nablation.term = gain_only\nablation.layers = 1-2\n")
    assert cfg.method.name == "ln[gain_only,layers_1-2]"


@pytest.mark.parametrize(
    "text, path",
    [
        ("[method]\nmethod = ln\n[train]\nlr = 1\n", "train.lr"),
        ("[method]\nmethod = ln\n[train]\nmax_epochs = ten\n", "train.max_epochs"),
        ("[method]\nmethod = ln\n[shape]\npreset = gpt-9\n", "shape.preset"),
        ("[method]\nmethod = ln\n[bogus]\nx = 1\n", "bogus"),
        ("[shape]\npreset = desk-base\n", "method"),
        ("[method]\nmethod = nope\n", "method.method"),
        ("[method]\nmethod = ln\ncolour = red\n", "method.colour"),
        ("[method]\nmethod = ln\n[experiment]\nrepeats = 0\n", "experiment.repeats"),
        ("[method]\nmethod = ln\n[task]\nkind = kv_to_text\n", "task.kind"),
        ("[method]\nmethod = ln\n[task]\nseq_len = 99\n", "task.seq_len"),
        ("[method]\nmethod = ln\n[task]\nkind = mlm_pretrain\n", "task.kind"),
        ("[method]\nmethod = ln\n[task]\nshift_strength = 2\n", "task.shift_strength"),
        ("[method]\nmethod = ln\n[pretrain]\nepochs = x\n", "pretrain.epochs"),
        ("not an ini", "file"),
    ],
)
def test_validation_errors_name_the_field(text, path):
    with pytest.raises(ValidationError) as info:
        parse_experiment(text)
    assert info.value.path == path


def test_validation_error_is_config_error():
    assert issubclass(ValidationError, ConfigError)


def test_missing_file():
    with pytest.raises(ValidationError):
        load_experiment("/nonexistent/x.ini")


def test_fingerprint_tracks_identity():
    a = parse_experiment("[method]\nmethod = ln\n")
    b = parse_experiment("[method]\nmethod = ln\n[experiment]\nname = other\noutput_dir = elsewhere\n")
    assert a.fingerprint() == b.fingerprint()  # names and paths do not change results
    assert a.fingerprint() != a.with_seed(5).fingerprint()
    c = parse_experiment("[method]\nmethod = ln\n[train]\nmax_epochs = 5\n")
    assert a.fingerprint() != c.fingerprint()


def test_render_round_trips(tiny_config):
    for cfg in (load_experiment(tiny_config("mam", "prefix_len = 2\nbottleneck = 3\n")),
                parse_experiment("[method]\nmethod = ln\nablation.module = ffn_only\n")):
        again = parse_experiment(render_experiment(cfg))
        assert again == cfg


def test_sweep_paths_are_relative_to_the_sweep(tmp_path):
    (tmp_path / "sub").mkdir()
    sweep = tmp_path / "sub" / "s.ini"
    sweep.write_text("[sweep]\nexperiments =\n    a.ini\n    ../b.ini\n")
    assert load_sweep(sweep) == [tmp_path / "sub" / "a.ini", tmp_path / "b.ini"]


@pytest.mark.parametrize("text", ["[sweep]\n", "[sweep]\nexperiments =\n", "[other]\nx = 1\n"])
def test_bad_sweeps(tmp_path, text):
    path = tmp_path / "s.ini"
    path.write_text(text)
    with pytest.raises(ValidationError):
        load_sweep(path)


@pytest.mark.parametrize("sweep", ["transfer.sweep.ini", "unified.sweep.ini", "ablation.sweep.ini"])
def test_shipped_configs_parse(sweep):
    configs = [load_experiment(p) for p in load_sweep(CONFIGS / sweep)]
    assert all(isinstance(c, ExperimentConfig) for c in configs)
    names = [c.method.name for c in configs]
    assert len(set(names)) == len(names)
