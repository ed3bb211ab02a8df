"""Run-config loading: defaults, validation, path resolution, backend
construction."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from survcase.backend.http import HttpBackend
from survcase.backend.mock import MockBackend
from survcase.config import ConfigError, RunConfig, load_config, make_backend
from survcase.wsi import SelectionPolicy


def write_cohort_file(tmp_path) -> Path:
    p = tmp_path / "cohort.json"
    p.write_text(
        json.dumps(
            {
                "cohort_id": "t",
                "cases": [
                    {"case_id": "c1", "slide_manifest": "s.json", "gene_profile": "g.tsv"}
                ],
            }
        ),
        encoding="utf-8",
    )
    return p


def write_toml(tmp_path, body: str) -> Path:
    p = tmp_path / "run.toml"
    p.write_text(body, encoding="utf-8")
    return p


def test_minimal_config_gets_documented_defaults(tmp_path):
    write_cohort_file(tmp_path)
    p = write_toml(tmp_path, 'cohort = "cohort.json"\n')
    cfg = load_config(p)
    assert cfg.cohort == (tmp_path / "cohort.json").resolve()
    assert cfg.output_dir == (tmp_path / "runs").resolve()
    assert cfg.backend == "mock" and cfg.mock_mode == "oracle"
    assert (cfg.tau_v, cfg.tau_t) == (0.93, 0.93)
    assert (cfg.k, cfg.d, cfg.folds, cfg.seed) == (3, 2, 5, 7)
    assert cfg.policy is SelectionPolicy.LITERAL
    assert cfg.weights == (0.5, 0.5)
    assert (cfg.eps, cfg.min_pts, cfg.attention_percentile) == (4.0, 10, 90.0)
    assert (cfg.max_rounds, cfg.max_key_genes) == (3, 10)
    assert cfg.config_sha256 == hashlib.sha256(p.read_bytes()).hexdigest()


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "conf"
    sub.mkdir()
    write_cohort_file(sub)
    (sub / "experts.csv").write_text("case_id,model_name,risk_score\nc1,m,1\n")
    p = write_toml(
        sub,
        'cohort = "cohort.json"\nexperts = "experts.csv"\noutput_dir = "../out"\n',
    )
    cfg = load_config(p)
    assert cfg.experts == (sub / "experts.csv").resolve()
    assert cfg.output_dir == (tmp_path / "out").resolve()


def test_policy_parses_and_rejects_unknown(tmp_path):
    write_cohort_file(tmp_path)
    cfg = load_config(write_toml(tmp_path, 'cohort = "cohort.json"\npolicy = "greedy"\n'))
    assert cfg.policy is SelectionPolicy.GREEDY
    with pytest.raises(ConfigError, match="policy"):
        load_config(write_toml(tmp_path, 'cohort = "cohort.json"\npolicy = "eager"\n'))


def test_unknown_keys_rejected_not_ignored(tmp_path):
    write_cohort_file(tmp_path)
    with pytest.raises(ConfigError, match="tau_w"):
        load_config(write_toml(tmp_path, 'cohort = "cohort.json"\ntau_w = 0.9\n'))
    # the recorded hash is derived, not configurable
    with pytest.raises(ConfigError, match="config_sha256"):
        load_config(write_toml(tmp_path, 'cohort = "cohort.json"\nconfig_sha256 = "x"\n'))


def test_missing_cohort_key_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError, match="cohort"):
        load_config(write_toml(tmp_path, 'seed = 7\n'))
    with pytest.raises(ConfigError, match="TOML"):
        load_config(write_toml(tmp_path, 'cohort = [unclosed\n'))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "ghost.toml")


def test_missing_referenced_files_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cohort file not found"):
        load_config(write_toml(tmp_path, 'cohort = "nope.json"\n'))
    write_cohort_file(tmp_path)
    with pytest.raises(ConfigError, match="experts"):
        load_config(write_toml(tmp_path, 'cohort = "cohort.json"\nexperts = "nope.csv"\n'))


@pytest.mark.parametrize(
    "line,hint",
    [
        ("tau_v = 0.0", "tau_v"),
        ("tau_t = 1.5", "tau_t"),
        ("k = 0", "k"),
        ("d = 3", "d"),
        ("folds = 1", "folds"),
        ("jobs = 0", "jobs"),
        ("max_rounds = -1", "max_rounds"),
        ('backend = "carrier"', "backend"),
        ('mock_mode = "live"', "mock_mode"),
        ("weight_wsi = 0.9", "sum to 1"),
    ],
)
def test_out_of_range_values_rejected(tmp_path, line, hint):
    write_cohort_file(tmp_path)
    with pytest.raises(ConfigError, match=hint):
        load_config(write_toml(tmp_path, f'cohort = "cohort.json"\n{line}\n'))


def test_weights_can_rebalance_when_they_still_sum_to_one(tmp_path):
    write_cohort_file(tmp_path)
    cfg = load_config(
        write_toml(tmp_path, 'cohort = "cohort.json"\nweight_wsi = 0.7\nweight_gene = 0.3\n')
    )
    assert cfg.weights == (0.7, 0.3)


def test_make_backend_mock_reads_cohort_tree(tmp_path):
    write_cohort_file(tmp_path)
    cfg = load_config(write_toml(tmp_path, 'cohort = "cohort.json"\nembed_dim = 16\n'))
    backend = make_backend(cfg)
    assert isinstance(backend, MockBackend)
    assert backend.mode == "oracle"
    assert backend.config.embed_dim == 16
    assert backend.embed_text("anything").shape == (16,)


def test_make_backend_http_carries_transport_settings(tmp_path):
    write_cohort_file(tmp_path)
    cfg = load_config(
        write_toml(
            tmp_path,
            'cohort = "cohort.json"\nbackend = "http"\n'
            'endpoint = "https://api.test/v1"\nmodel = "m-1"\nretries = 5\n',
        )
    )
    backend = make_backend(cfg)
    assert isinstance(backend, HttpBackend)
    assert backend.config.endpoint == "https://api.test/v1"
    assert backend.config.model == "m-1"
    assert backend.config.retries == 5


def test_run_config_requires_existing_cohort(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(cohort=tmp_path / "nope.json", output_dir=tmp_path)
