import numpy as np
import pytest

from ampal.model import AudioSignal, ModelConfig, forward, init_model, receptive_field
from ampal.oracle import label
from ampal.signals import plucked_dry
from ampal.training import (
    LabeledDataset, TrainConfig, TrainingDivergedError, chunk_loss, make_chunks, mse,
    train_ensemble, train_model,
)

TINY = ModelConfig(channels=3, kernel_width=3, dilations=(1, 2, 4), head_channels=3)
FAST = TrainConfig(epochs=3, chunk_length=64, batch_size=4, lr=5e-3, precision="float64")


@pytest.fixture(scope="module")
def dataset():
    x = plucked_dry(300 / 16000, 16000, seed=11, mean_note=0.005)
    ds = LabeledDataset(x)
    for g in np.random.default_rng(0).uniform(size=(3, 6)):
        label(ds, g)
    return ds


class TestMSE:
    def test_identical(self):
        assert mse(np.arange(5.0), np.arange(5.0)) == 0.0

    def test_zeros_vs_ones(self):
        assert mse(np.zeros(4), np.ones(4)) == 1.0

    def test_hand_value(self):
        assert mse([0.0, 2.0], [1.0, 0.0]) == 2.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            mse(np.zeros(3), np.zeros(4))


class TestChunks:
    def test_two_chunks_per_pair(self):
        x = AudioSignal(np.linspace(-1, 1, 100), 16000)
        ds = LabeledDataset(x)
        label(ds, np.full(6, 0.5))
        label(ds, np.full(6, 0.2))
        chunks = make_chunks(ds, TrainConfig(chunk_length=50), rf=8)
        assert len(chunks) == 4
        assert [c.pair for c in chunks] == [0, 0, 1, 1]

    def test_targets_tile_signal(self, dataset):
        rf = receptive_field(TINY)
        chunks = make_chunks(dataset, TrainConfig(chunk_length=64), rf)
        for i, (_, wet) in enumerate(dataset.pairs):
            parts = [c.wet[:c.valid] for c in chunks if c.pair == i]
            np.testing.assert_array_equal(np.concatenate(parts), wet.samples)

    def test_left_context_zero_padded(self, dataset):
        rf = receptive_field(TINY)
        c0 = make_chunks(dataset, TrainConfig(chunk_length=64), rf)[0]
        np.testing.assert_array_equal(c0.dry[:rf - 1], 0.0)
        np.testing.assert_array_equal(c0.dry[rf - 1:], dataset.x.samples[:64])

    def test_chunk_loss_equals_full_signal_loss(self, dataset):
        p = init_model(TINY, 0)
        rng = np.random.default_rng(1)
        for n in p.arrays:
            if n.startswith("head"):
                p.arrays[n] = rng.uniform(-0.5, 0.5, p.arrays[n].shape)
        chunks = make_chunks(dataset, TrainConfig(chunk_length=64), receptive_field(TINY))
        sse, count = chunk_loss(p, chunks)
        full = np.mean([mse(forward(p, dataset.x, g), w) for g, w in dataset.pairs])
        assert sse / count == pytest.approx(full, abs=1e-10)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            make_chunks(LabeledDataset(AudioSignal(np.zeros(10), 16000)), TrainConfig(), 4)

    def test_chunk_shorter_than_receptive_field(self, dataset):
        with pytest.raises(ValueError, match="receptive field"):
            make_chunks(dataset, TrainConfig(chunk_length=4), rf=15)


class TestSchedule:
    def test_constant_by_default(self):
        c = TrainConfig(epochs=5, lr=0.01)
        assert [c.lr_at(e) for e in range(5)] == [0.01] * 5

    def test_geometric_decay_endpoints(self):
        c = TrainConfig(epochs=5, lr=1e-2, lr_final=1e-4)
        assert c.lr_at(0) == 1e-2
        assert c.lr_at(4) == pytest.approx(1e-4, rel=1e-12)
        assert c.lr_at(2) == pytest.approx(1e-3, rel=1e-12)

    def test_rejects_nonpositive_final(self):
        with pytest.raises(ValueError, match="lr_final"):
            TrainConfig(lr_final=0.0).validate()


class TestTrainModel:
    def test_identity_task_improves(self):
        x = plucked_dry(200 / 16000, 16000, seed=2, mean_note=0.005)
        ds = LabeledDataset(x)
        ds.add(np.full(6, 0.5), x)
        _, hist = train_model(init_model(TINY, 0), ds, TrainConfig(epochs=20, chunk_length=200, lr=1e-2,
                                                                     precision="float64"))
        assert hist[-1] < hist[0]

    def test_epochs_validated(self, dataset):
        with pytest.raises(ValueError, match="epochs"):
            train_model(init_model(TINY, 0), dataset, TrainConfig(epochs=0, chunk_length=64))

    def test_one_epoch_history(self, dataset):
        _, hist = train_model(init_model(TINY, 0), dataset, TrainConfig(epochs=1, chunk_length=64))
        assert len(hist) == 1 and np.isfinite(hist[0])

    def test_deterministic(self, dataset):
        a, ha = train_model(init_model(TINY, 0), dataset, FAST)
        b, hb = train_model(init_model(TINY, 0), dataset, FAST)
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert ha == hb

    def test_full_batch_loss_matches_post_hoc(self, dataset):
        init = init_model(TINY, 4)
        rng = np.random.default_rng(4)
        for n in init.arrays:
            if n.startswith("head"):
                init.arrays[n] = rng.uniform(-0.5, 0.5, init.arrays[n].shape)
        cfg = TrainConfig(epochs=1, chunk_length=64, batch_size=1000, precision="float64")
        _, hist = train_model(init, dataset, cfg)
        post = np.mean([mse(forward(init, dataset.x, g), w) for g, w in dataset.pairs])
        assert hist[0] == pytest.approx(post, abs=1e-9)

    def test_single_pair_fits(self):
        x = plucked_dry(256 / 16000, 16000, seed=5, mean_note=0.005)
        ds = LabeledDataset(x)
        label(ds, np.array([0.4, 0.5, 0.5, 0.5, 1.0, 0.5]))
        cfg = TrainConfig(epochs=150, chunk_length=256, batch_size=1, lr=1e-2, precision="float64")
        _, hist = train_model(init_model(TINY, 1), ds, cfg)
        assert hist[-1] < 0.1 * hist[0]
        assert np.all(np.isfinite(hist))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch(self, dataset):
        cfg = TrainConfig(epochs=5, chunk_length=64, lr=1e300, precision="float64")
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train_model(init_model(TINY, 0), dataset, cfg)

    def test_progress_lines(self, dataset, capsys):
        train_model(init_model(TINY, 0), dataset, TrainConfig(epochs=2, chunk_length=64, verbose=True))
        lines = capsys.readouterr().out.strip().splitlines()
        assert [ln.split()[0:2] for ln in lines] == [["epoch", "0"], ["epoch", "1"]]
        assert all(ln.split()[2] == "loss" and float(ln.split()[3]) >= 0 for ln in lines)


class TestEnsemble:
    def test_four_members_differ(self, dataset):
        ens = train_ensemble(dataset, 4, [0, 1, 2, 3], FAST, TINY)
        assert len(ens) == 4
        flats = [m.flat() for m in ens.models]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(flats[i] - flats[j]) > 0

    def test_same_seeds_same_ensemble(self, dataset):
        a = train_ensemble(dataset, 2, [5, 6], FAST, TINY)
        b = train_ensemble(dataset, 2, [5, 6], FAST, TINY)
        for ma, mb in zip(a.models, b.models):
            np.testing.assert_array_equal(ma.flat(), mb.flat())

    def test_duplicate_seeds(self, dataset):
        with pytest.raises(ValueError, match="distinct"):
            train_ensemble(dataset, 2, [1, 1], FAST, TINY)

    def test_seed_count(self, dataset):
        with pytest.raises(ValueError):
            train_ensemble(dataset, 3, [1, 2], FAST, TINY)

    def test_parallel_matches_serial(self, dataset):
        a = train_ensemble(dataset, 2, [7, 8], FAST, TINY, workers=1)
        b = train_ensemble(dataset, 2, [7, 8], FAST, TINY, workers=2)
        for ma, mb in zip(a.models, b.models):
            np.testing.assert_array_equal(ma.flat(), mb.flat())
