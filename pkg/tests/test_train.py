import numpy as np
import pytest

from pcnet.config import RunConfig
from pcnet.data import synth_vessels, DataError
from pcnet.storage import save_tensor, write_manifest
from pcnet.train import (NumericFailure, load_records, augmented_records,
                         prepare_samples, train_model, evaluate_samples,
                         preprocess_pixels, write_loss_log)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    rows = []
    for i in range(3):
        rec = synth_vessels(2, 96, seed=50 + i, record_id=f"r{i}")
        save_tensor(root / f"{rec.id}_px.pctn", rec.pixels)
        save_tensor(root / f"{rec.id}_mk.pctn", rec.mask)
        rows.append((rec.id, f"{rec.id}_px.pctn", f"{rec.id}_mk.pctn"))
    write_manifest(root / "manifest.tsv", rows)
    return root / "manifest.tsv"


def tiny_cfg(**kw):
    base = dict(variant="UNet", base_channels=4, epochs=1, patches=100,
                augment_copies=0, seed=3)
    base.update(kw)
    return RunConfig(**base)


class TestDataPreparation:
    def test_load_records_applies_preprocessing(self, dataset):
        cfg = tiny_cfg()
        records = load_records(cfg, dataset)
        assert len(records) == 3
        assert all(r.pixels.data.min() >= 0 and r.pixels.data.max() <= 1
                   for r in records)

    def test_augmented_records_extend_2d(self, dataset):
        cfg = tiny_cfg(augment_copies=2)
        records = augmented_records(cfg, load_records(cfg, dataset))
        assert len(records) == 9
        assert records[3].id.endswith("~a0")

    def test_holdout_split_sizes(self, dataset):
        cfg = tiny_cfg(holdout_fraction=0.25, patches=200)
        records = load_records(cfg, dataset)
        train, hold = prepare_samples(cfg, records)
        assert len(hold) == 50
        assert len(train) == 150

    def test_split_deterministic(self, dataset):
        cfg = tiny_cfg()
        records = load_records(cfg, dataset)
        a_train, a_hold = prepare_samples(cfg, records)
        b_train, b_hold = prepare_samples(cfg, records)
        assert a_train.digest() == b_train.digest()
        assert a_hold.digest() == b_hold.digest()


class TestTrainModel:
    def test_loss_rows_and_descent(self, dataset):
        cfg = tiny_cfg(patches=320, epochs=2)
        records = load_records(cfg, dataset)
        train, _ = prepare_samples(cfg, records)
        model, rows = train_model(cfg, train)
        assert rows[0][0] == 1 and rows[-1][0] == len(rows)
        # weighted parts sum to the logged total
        for r in rows:
            assert r[4] == pytest.approx(r[1] + r[2] + r[3], abs=1e-5)
        first = np.mean([r[4] for r in rows[:3]])
        last = np.mean([r[4] for r in rows[-3:]])
        assert last < first

    def test_no_ds_variant_logs_zero_aux(self, dataset):
        cfg = tiny_cfg(variant="UNetNoDS", patches=64)
        records = load_records(cfg, dataset)
        train, _ = prepare_samples(cfg, records)
        _, rows = train_model(cfg, train)
        assert all(r[2] == 0.0 and r[3] == 0.0 for r in rows)
        assert all(r[4] == pytest.approx(r[1], abs=1e-7) for r in rows)

    def test_deterministic_loss_rows(self, dataset):
        cfg = tiny_cfg(patches=64)
        records = load_records(cfg, dataset)
        train, _ = prepare_samples(cfg, records)
        _, rows_a = train_model(cfg, train)
        _, rows_b = train_model(cfg, train)
        assert rows_a == rows_b

    def test_numeric_failure_detected(self, dataset):
        cfg = tiny_cfg(patches=64, learning_rate=1e6)  # diverges immediately
        records = load_records(cfg, dataset)
        train, _ = prepare_samples(cfg, records)
        with pytest.raises((NumericFailure, FloatingPointError)):
            model, rows = train_model(cfg, train)
            if np.isfinite(rows[-1][4]):  # in case it survives one epoch
                raise NumericFailure("expected divergence")

    def test_empty_training_set_rejected(self, dataset):
        cfg = tiny_cfg(patches=0)
        with pytest.raises(DataError):
            train_model(cfg, prepare_samples(cfg, load_records(cfg, dataset))[0])


class TestEvaluation:
    def test_holdout_report_fields(self, dataset):
        cfg = tiny_cfg(patches=128)
        records = load_records(cfg, dataset)
        train, hold = prepare_samples(cfg, records)
        model, _ = train_model(cfg, train)
        rep = evaluate_samples(model, hold, cfg)
        assert rep.tp + rep.fp + rep.tn + rep.fn == sum(
            s.patch.size for s in hold)
        assert rep.auc is None or 0 <= rep.auc <= 1

    def test_loss_log_format(self, tmp_path):
        rows = [(1, 0.5, 0.1, 0.05, 0.65), (2, 0.4, 0.08, 0.04, 0.52)]
        path = tmp_path / "log.csv"
        write_loss_log(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,main,aux2,aux3,total"
        assert lines[1] == "1,0.500000,0.100000,0.050000,0.650000"
