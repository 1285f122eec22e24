import numpy as np
import pytest

import quadrank.training as train_mod
from quadrank.adadelta import AdadeltaState, adadelta_step
from quadrank.correspond import IDENTITY_TRANSFORMS, make_aligned_pair
from quadrank.model import build_model, save_model
from quadrank.ranking import hinge_grad
from quadrank.training import TrainConfig, TrainingDiverged, train, warp_sources


def tiny_images():
    return [
        np.random.default_rng(s).uniform(0.1, 0.9, (64, 64)).astype(np.float32)
        for s in (1, 2)
    ]


@pytest.fixture(scope="module")
def pinned_run():
    """The fixed tiny-dataset training run several tests inspect."""
    cfg = TrainConfig(
        arch="linear", epochs=50, quads_per_pair=512, batch_size=128, seed=7, heldout_quads=400
    )
    return train(cfg, warp_sources(tiny_images(), "warp-small"))


class TestTrainLoop:
    def test_zero_epochs_returns_initial_model(self):
        cfg = TrainConfig(arch="linear", epochs=0, quads_per_pair=64, batch_size=32, seed=5)
        model1, log1 = train(cfg, warp_sources(tiny_images(), "warp-small"))
        model2, log2 = train(cfg, warp_sources(tiny_images(), "warp-small"))
        assert log1.records == []
        assert np.isfinite(log1.initial_heldout_misrank)
        for a, b in zip(model1.params(), model2.params()):
            assert np.array_equal(a, b)

    def test_pinned_run_halves_hinge_loss(self, pinned_run):
        # pinned expectation from the first verified run of this config:
        # mean hinge 0.99 -> 0.40 over 50 epochs
        _, log = pinned_run
        assert len(log.records) == 50
        assert log.records[-1].mean_loss <= 0.5 * log.records[0].mean_loss

    def test_pinned_run_heldout_misrank_decreases(self, pinned_run):
        _, log = pinned_run
        assert log.records[-1].heldout_misrank <= log.initial_heldout_misrank

    def test_log_rows_complete(self, pinned_run):
        _, log = pinned_run
        for i, rec in enumerate(log.records, start=1):
            assert rec.epoch == i
            assert np.isfinite(rec.mean_loss)
            assert 0.0 <= rec.misrank <= 1.0
            assert len(rec.rng_digest) == 16
        csv = log.to_csv("hdr")
        assert csv.count("\n") == 2 + 1 + 50
        assert "seconds" not in csv.splitlines()[2]

    def test_deterministic_model_files(self, tmp_path):
        cfg = TrainConfig(arch="linear", epochs=5, quads_per_pair=128, batch_size=64, seed=11, heldout_quads=50)
        out = []
        for run in range(2):
            model, log = train(cfg, warp_sources(tiny_images(), "warp-small"))
            path = tmp_path / f"m{run}.qrnk"
            save_model(model, path)
            out.append((path.read_bytes(), log.to_csv()))
        assert out[0][0] == out[1][0]
        assert out[0][1] == out[1][1]

    def test_frozen_identity_pairs_stay_rankable(self):
        imgs = tiny_images()
        pairs = [make_aligned_pair(img, img) for img in imgs]
        cfg = TrainConfig(
            arch="linear",
            epochs=10,
            quads_per_pair=256,
            batch_size=64,
            seed=3,
            heldout_quads=300,
            invariance=IDENTITY_TRANSFORMS,
            augmentation=IDENTITY_TRANSFORMS,
        )
        _, log = train(cfg, pairs)
        assert log.records[-1].heldout_misrank < 0.05

    def test_single_misranked_quadruple_improves_after_one_step(self):
        rng = np.random.default_rng(13)
        model = build_model("mlp32", seed=21)
        patches = rng.normal(0, 1, (4, 17, 17)).astype(np.float32)
        h, caches = model.forward(patches, train=True)
        loss_before, grads4 = hinge_grad(*h)
        assert loss_before > 0  # random responses essentially never satisfy R >= 1
        upstream = np.array(grads4).reshape(4)
        grads = model.backward(caches, upstream)
        state = AdadeltaState.for_params(model.params())
        adadelta_step(state, model.params(), grads)
        h2, _ = model.forward(patches, train=True)
        loss_after, _ = hinge_grad(*h2)
        assert loss_after < loss_before

    def test_divergence_aborts_with_error(self, monkeypatch):
        def nan_grad(h1, h2, h3, h4):
            bad = np.full_like(np.asarray(h1, dtype=np.float64), np.nan)
            return bad, (bad, bad, bad, bad)

        monkeypatch.setattr(train_mod, "hinge_grad", nan_grad)
        cfg = TrainConfig(arch="linear", epochs=2, quads_per_pair=64, batch_size=32, seed=1, heldout_quads=0)
        with pytest.raises(TrainingDiverged):
            train(cfg, warp_sources(tiny_images(), "warp-small"))

    def test_checkpoints_written(self, tmp_path):
        cfg = TrainConfig(
            arch="linear",
            epochs=4,
            quads_per_pair=64,
            batch_size=32,
            seed=2,
            heldout_quads=0,
            checkpoint_every=2,
            checkpoint_path=tmp_path / "model.qrnk",
        )
        train(cfg, warp_sources(tiny_images(), "warp-small"))
        assert (tmp_path / "model.epoch00002.qrnk").exists()
        assert (tmp_path / "model.epoch00004.qrnk").exists()

    def test_checkpoint_resumes_exactly(self, tmp_path):
        from quadrank.model import load_model

        cfg = TrainConfig(
            arch="linear",
            epochs=3,
            quads_per_pair=64,
            batch_size=32,
            seed=4,
            heldout_quads=0,
            checkpoint_every=3,
            checkpoint_path=tmp_path / "m.qrnk",
        )
        model, _ = train(cfg, warp_sources(tiny_images(), "warp-small"))
        restored, state = load_model(tmp_path / "m.epoch00003.qrnk", with_optimizer=True)
        assert state is not None
        for a, b in zip(model.params(), restored.params()):
            assert np.array_equal(a, b)
        assert all(np.all(arr >= 0) for arr in state.acc_grad_sq)


class TestConfigValidation:
    def test_batch_exceeding_pool_rejected(self):
        cfg = TrainConfig(batch_size=512, quads_per_pair=256)
        with pytest.raises(ValueError):
            cfg.validate()

    def test_unknown_source_rejected(self):
        cfg = TrainConfig(source="laser-scans")
        with pytest.raises(ValueError, match="unknown source"):
            cfg.validate()

    def test_warp_sources_kinds(self):
        imgs = tiny_images()
        small = warp_sources(imgs, "warp-small")
        assert len(small) == 2 and all(callable(s) for s in small)
        rng = np.random.default_rng(0)
        pair = small[0](rng)
        assert pair.image_a.shape == (64, 64)
        with pytest.raises(KeyError):
            warp_sources(imgs, "aligned")
