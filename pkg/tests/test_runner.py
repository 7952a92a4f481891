import json

import pytest

from lntune.config import load_experiment
from lntune.runner import CacheError, ResultsStore, RunResult, base_key, ensure_base, run_experiment


@pytest.fixture
def cfg(tiny_config):
    return load_experiment(tiny_config("mam", "prefix_len = 2\nbottleneck = 2\nadd_ln = true\n"))


def test_run_writes_result_and_timings(cfg):
    result = run_experiment(cfg)
    store = ResultsStore(cfg.output_dir)
    assert store.run_path(result.fingerprint).exists()
    timings = store.load_timings(result.fingerprint)
    assert len(timings.train_step_seconds) == cfg.repeats
    assert result.seeds == cfg.seeds
    assert result.method == "mam+ln"
    assert 0.0 <= result.mean_metric <= 1.0
    assert result.accounting["trainable"] > 0
    assert store.base_path(base_key(cfg)).exists()


def test_rerun_is_byte_identical(cfg):
    store = ResultsStore(cfg.output_dir)
    first = run_experiment(cfg)
    before = store.run_path(first.fingerprint).read_bytes()
    run_experiment(cfg, force=True)
    assert store.run_path(first.fingerprint).read_bytes() == before


def test_cached_result_is_returned_without_training(cfg, monkeypatch):
    first = run_experiment(cfg)
    import lntune.runner as runner

    def boom(*a, **k):
        raise AssertionError("should not train")

    monkeypatch.setattr(runner, "lr_search", boom)
    assert run_experiment(cfg) == first


def test_result_json_round_trip(cfg):
    result = run_experiment(cfg)
    assert RunResult.from_json(result.to_json()) == result
    assert json.loads(result.to_json())["format"] == 1


def test_corrupt_result_raises_cache_error(cfg):
    result = run_experiment(cfg)
    store = ResultsStore(cfg.output_dir)
    store.run_path(result.fingerprint).write_text("{ not json")
    with pytest.raises(CacheError, match="--force"):
        run_experiment(cfg)
    assert run_experiment(cfg, force=True).fingerprint == result.fingerprint


def test_corrupt_base_raises_cache_error(cfg):
    store = ResultsStore(cfg.output_dir)
    path = store.base_path(base_key(cfg))
    path.parent.mkdir(parents=True)
    path.write_bytes(b"garbage")
    with pytest.raises(CacheError):
        ensure_base(cfg, store)
    ensure_base(cfg, store, force=True)
    ensure_base(cfg, store)


def test_base_is_shared_between_methods(tiny_config):
    a = load_experiment(tiny_config("ln"))
    b = load_experiment(tiny_config("bitfit"))
    assert base_key(a) == base_key(b)
    assert a.fingerprint() != b.fingerprint()


def test_all_results_skips_timings(cfg, tiny_config):
    run_experiment(cfg)
    run_experiment(load_experiment(tiny_config("bitfit")))
    methods = sorted(r.method for r in ResultsStore(cfg.output_dir).all_results())
    assert methods == ["bitfit", "mam+ln"]


def test_empty_store(tmp_path):
    assert ResultsStore(tmp_path / "none").all_results() == []
