import csv
from dataclasses import replace

import pytest
import torch

from sdacd.core import DomainTag as T
from sdacd.data import SyntheticConfig, synthesize_benchmark
from sdacd.errors import CheckpointError, ConfigError, TrainingAbort
from sdacd.objectives import LossWeights
from sdacd.trainer import (
    CKPT_FORMAT, LOG_FIELDS, PHASES, ModelState, TrainConfig, load_checkpoint, parameter_census,
    read_checkpoint, save_checkpoint, train, train_step,
)
from phase_probe import record_phase_mutations

SMALL = dict(gen_width=4, disc_width=4, ext_width=4, df_width=4, gen_blocks=1, augment=False)


@pytest.fixture(scope="module")
def data():
    return synthesize_benchmark(SyntheticConfig(n_samples=4, tile_size=32, seed=11))


def test_phase_table():
    assert [p[0] for p in PHASES] == list(range(1, 9))
    assert PHASES[-1][2] == ("classifier", "extractor")


def test_phase_isolation_full(data):
    state = ModelState(TrainConfig(**SMALL))
    log = record_phase_mutations(state, [data[:2], data[2:]] * 2)
    assert [n for n, _, _ in log] == list(range(1, 9)) * 4
    for number, designated, changed in log:
        assert changed == designated, f"phase {number}"


def test_baseline_mode_touches_only_detector(data):
    state = ModelState(TrainConfig(ia_enabled=False, fa_enabled=False, **SMALL))
    assert set(state.nets) == {"extractor", "classifier"}
    log = record_phase_mutations(state, [data[:2]])
    assert [n for n, _, _ in log] == [5, 6, 8]
    for _, designated, changed in log:
        assert changed == designated


def test_determinism(data):
    def run():
        cfg = TrainConfig(seed=7, **SMALL)
        state = ModelState(cfg)
        return [train_step(state, data[i:i + 2])[1] for i in (0, 2, 0)]
    assert run() == run()


def test_bundle_fields(data):
    _, b = train_step(ModelState(TrainConfig(**SMALL)), data[:2])
    assert len(b.cd_per_pair) == 3
    assert b.cyc > 0 and b.adv_i > 0 and b.adv_f_disc > 0 and b.adv_f_conf > 0


def test_census(data):
    state = ModelState(TrainConfig(**SMALL))
    census = parameter_census(state)
    assert census["total"] == sum(v for k, v in census.items() if k != "total")
    train_step(state, data[:2])
    assert parameter_census(state) == census
    base = parameter_census(ModelState(TrainConfig(ia_enabled=False, fa_enabled=False, **SMALL)))
    assert set(base) == {"extractor", "classifier", "total"}


def test_fa_needs_two_tags():
    cfg = TrainConfig(active_tags=(T.ORIGINAL,), **SMALL)
    assert not cfg.fa_active
    assert "d_f" not in ModelState(cfg).nets
    two = TrainConfig(active_tags=(T.ORIGINAL, T.PRE_DOMAIN), **SMALL)
    assert ModelState(two).nets["d_f"].n_domains == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(ia_enabled=False, active_tags=(T.PRE_DOMAIN,))
    cfg = TrainConfig(loss_weights=LossWeights(1, 2, 3, 4), **SMALL)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_inputs(data):
    with pytest.raises(ConfigError):
        train(TrainConfig(**SMALL), [])
    with pytest.raises(ConfigError):
        train_step(ModelState(TrainConfig(**SMALL)), [])


def test_nan_aborts_with_phase(data):
    state = ModelState(TrainConfig(**SMALL))
    with torch.no_grad():
        next(state.nets["d_pre"].parameters()).fill_(float("nan"))
    with pytest.raises(TrainingAbort) as info:
        train_step(state, data[:2])
    assert info.value.phase == "g_pre"


def test_smoke_run_and_log(tmp_path, data):
    res = train(TrainConfig(epochs=1, batch_size=2, **SMALL), data, tmp_path, val=data[:2], config_hash="h")
    assert res["final"] == tmp_path / "final.pt" and res["final"].exists()
    rows = list(csv.DictReader((tmp_path / "train_log.csv").open()))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 2
    assert (tmp_path / "val_metrics.csv").exists()
    payload = read_checkpoint(res["final"])
    assert payload["format"] == CKPT_FORMAT and payload["config_hash"] == "h"
    assert set(payload["segments"]) == {"g_pre", "g_post", "d_pre", "d_post", "extractor", "classifier",
                                        "fusion_head", "domain_discriminator"}


def test_checkpoint_roundtrip(tmp_path, data):
    state = ModelState(TrainConfig(**SMALL))
    train_step(state, data[:2])
    path = save_checkpoint(state, tmp_path / "c.pt")
    loaded, _ = load_checkpoint(path)
    assert loaded.checksums() == state.checksums()
    assert loaded.step == 1
    pre = torch.rand(1, 3, 32, 32)
    assert torch.equal(loaded.predictor()(pre, pre), state.predictor()(pre, pre))


def test_resume_continues(tmp_path, data):
    cfg = TrainConfig(epochs=1, batch_size=2, **SMALL)
    first = train(cfg, data, tmp_path / "a")
    second = train(replace(cfg, epochs=2), data, tmp_path / "b", resume=first["final"])
    assert second["state"].step == 4 and second["state"].epoch == 2
    straight = train(replace(cfg, epochs=2), data)
    assert second["state"].checksums() == straight["state"].checksums()


def test_bad_checkpoint(tmp_path):
    bad = tmp_path / "x.pt"
    bad.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    torch.save({"format": "other"}, bad)
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)


def test_predictor_width_mismatch():
    state = ModelState(TrainConfig(**SMALL))
    with pytest.raises(CheckpointError):
        state.predictor("feature", [T.ORIGINAL])
    state.predictor("output", [T.ORIGINAL])
    base = ModelState(TrainConfig(ia_enabled=False, **SMALL))
    with pytest.raises(CheckpointError):
        base.predictor("output", list(T))(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))
