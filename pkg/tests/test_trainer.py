import json

import numpy as np
import pytest

from insgen import tensor as T
from insgen.checkpoint import (CheckpointShapeError, CheckpointTruncatedError,
                               CheckpointVersionError, checkpoint_load, checkpoint_path,
                               checkpoint_save, latest_checkpoint)
from insgen.config import RunConfig
from insgen.datasets import DatasetError
from insgen.losses import d_logistic_loss, g_nonsat_loss, r1_penalty
from insgen.nets import disc_forward, mlp_forward
from insgen.optim import Adam
from insgen.trainer import (CSV_COLUMNS, TrainingDiverged, build_dataset, d_step, g_step,
                            init_state, iterate, read_metrics, run, train_iteration)
from insgen.tensor import Tensor

SMALL = [
    "model.g_hidden=[16,16]", "model.d_hidden=[16,16]", "model.feat_dim=16", "model.proj_dim=8",
    "trainer.batch=16", "dataset.subsample=64", "eval.samples=256",
]


def small_cfg(*extra):
    return RunConfig().override([*SMALL, *extra])


def params(net):
    return [p.data.copy() for p in net.parameters()]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.fixture
def setup():
    cfg = small_cfg()
    ds = build_dataset(cfg)
    return cfg, ds, init_state(cfg, ds)


def test_d_step_leaves_generator_untouched(setup):
    cfg, ds, st = setup
    g_before = params(st.g)
    for _ in range(3):
        d_step(st, cfg, ds.samples[:16])
    assert same(g_before, params(st.g))
    assert all(p.grad is None or not p.grad.any() for p in st.g.parameters())


def test_g_step_leaves_discriminator_untouched(setup):
    cfg, ds, st = setup
    for _ in range(6):
        train_iteration(st, cfg, ds)
    d_before, m_before = params(st.d), params(st.d_momentum)
    g_before = params(st.g)
    g_step(st, cfg)
    assert same(d_before, params(st.d)) and same(m_before, params(st.d_momentum))
    assert not same(g_before, params(st.g))
    assert all(p.requires_grad for p in st.d.parameters())


def test_momentum_never_receives_gradients(setup):
    cfg, ds, st = setup
    for _ in range(5):
        train_iteration(st, cfg, ds)
        assert all(p.grad is None and not p.requires_grad for p in st.d_momentum.parameters())


def test_queues_fill_and_stay_unit(setup):
    cfg, ds, st = setup
    for _ in range(5):
        train_iteration(st, cfg, ds)
    for q in (st.queue_real, st.queue_fake):
        assert q.fill == q.capacity
        np.testing.assert_allclose(np.linalg.norm(q.snapshot(), axis=1), 1.0, atol=1e-9)


def test_default_queue_is_five_percent():
    cfg = RunConfig()
    ds = build_dataset(cfg)
    st = init_state(cfg, ds)
    assert len(ds) == 512
    assert st.queue_real.capacity == st.queue_fake.capacity == round(0.05 * 512)


def baseline_cfg(*extra):
    return small_cfg("loss.lambda_r_d=0", "loss.lambda_f_d=0", "loss.lambda_g=0",
                     "augment.adaptive=false", "augment.p=0", *extra)


def test_baseline_d_steps_match_plain_gan_reference():
    cfg = baseline_cfg("loss.r1_interval=2")
    ds = build_dataset(cfg)
    st, ref = init_state(cfg, ds), init_state(cfg, ds)
    opt = Adam(ref.d.parameters(), cfg.trainer.lr_d, cfg.trainer.adam_betas)
    w = cfg.loss
    r = np.random.default_rng(0)
    for k in range(4):
        real = ds.samples[r.integers(0, len(ds), 16)]
        z = r.normal(size=(16, 2))
        d_step(st, cfg, real, z)
        with T.Graph():
            with T.no_grad():
                fake = mlp_forward(ref.g, z)
            logits = disc_forward(ref.d, T.concat_rows([Tensor(real), fake]), "domain")
            loss = d_logistic_loss(T.gather_rows(logits, np.arange(16)),
                                   T.gather_rows(logits, np.arange(16, 32)))
            if k % w.r1_interval == 0:
                loss = T.add(loss, r1_penalty(ref.d, real, w.r1_gamma * w.r1_interval))
            opt.zero_grad()
            T.backward(loss)
        opt.step()
        assert same(params(st.d), params(ref.d)), f"diverged at D step {k}"


def test_baseline_g_step_matches_plain_gan_reference():
    cfg = baseline_cfg()
    ds = build_dataset(cfg)
    st, ref = init_state(cfg, ds), init_state(cfg, ds)
    opt = Adam(ref.g.parameters(), cfg.trainer.lr_g, cfg.trainer.adam_betas)
    r = np.random.default_rng(1)
    for _ in range(3):
        z = r.normal(size=(16, 2))
        g_step(st, cfg, z)
        with T.Graph():
            for p in ref.d.parameters():
                p.requires_grad = False
            loss = g_nonsat_loss(disc_forward(ref.d, mlp_forward(ref.g, z), "domain"))
            opt.zero_grad()
            T.backward(loss)
            for p in ref.d.parameters():
                p.requires_grad = True
        opt.step()
        assert same(params(st.g), params(ref.g))


def test_ema_decay_zero_tracks_generator():
    cfg = small_cfg("trainer.ema_decay=0")
    ds = build_dataset(cfg)
    st = init_state(cfg, ds)
    train_iteration(st, cfg, ds)
    assert same(params(st.g), params(st.g_ema))


def test_adam_zero_grad_from_fresh_state_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], 0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_divergence_dumps_offending_step(tmp_path, monkeypatch):
    cfg = small_cfg("trainer.steps=3", "trainer.eval_every=1")
    import insgen.trainer as tr

    real = tr.d_logistic_loss

    def broken(a, b):
        out = real(a, b)
        out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(tr, "d_logistic_loss", broken)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        run(cfg, out_dir=tmp_path)
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert dump["step"] == 0


def test_missing_dataset_rejected_before_training(tmp_path):
    cfg = small_cfg("dataset.kind=table", f"dataset.path={tmp_path / 'none.csv'}")
    with pytest.raises(DatasetError, match="dataset.path"):
        run(cfg, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


# ---------------------------------------------------------------- runs, logs, checkpoints


def test_metrics_csv_columns_and_cadence(tmp_path):
    cfg = small_cfg("trainer.steps=20", "trainer.eval_every=5")
    records, st = run(cfg, out_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["step"] for r in rows] == [5, 10, 15, 20]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == CSV_COLUMNS
    assert st.step == 20


def test_override_gives_exact_step_count(tmp_path):
    _, st = run(small_cfg("trainer.steps=10", "trainer.eval_every=100"))
    assert st.step == 10


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    records, st = run(small_cfg("trainer.steps=0"), out_dir=tmp_path)
    assert records == [] and st.step == 0
    assert sorted(p.name for p in tmp_path.glob("*.insgen")) == ["ckpt_000000.insgen"]


def test_identical_runs_identical_logs(tmp_path):
    cfg = small_cfg("trainer.steps=30", "trainer.eval_every=10")
    run(cfg, out_dir=tmp_path / "a")
    run(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


def test_split_resume_matches_unbroken(tmp_path):
    full = small_cfg("trainer.steps=40", "trainer.eval_every=5", "trainer.ckpt_every=20")
    run(full, out_dir=tmp_path / "full")
    half = full.override(["trainer.steps=20"])
    run(half, out_dir=tmp_path / "split")
    state = checkpoint_load(checkpoint_path(tmp_path / "split", 20), full)
    run(full, out_dir=tmp_path / "split", state=state)
    assert ((tmp_path / "full/metrics.csv").read_bytes()
            == (tmp_path / "split/metrics.csv").read_bytes())


def test_checkpoint_round_trip_byte_identical(tmp_path):
    cfg = small_cfg("trainer.steps=7", "trainer.eval_every=100")
    _, st = run(cfg)
    a, b = tmp_path / "a.insgen", tmp_path / "b.insgen"
    checkpoint_save(st, cfg, a)
    checkpoint_save(checkpoint_load(a, cfg), cfg, b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_wrong_proj_dim_names_tensor(tmp_path):
    cfg = small_cfg("trainer.steps=2")
    _, st = run(cfg)
    path = tmp_path / "c.insgen"
    checkpoint_save(st, cfg, path)
    with pytest.raises(CheckpointShapeError, match=r"real_head\.0\.weight"):
        checkpoint_load(path, cfg.override(["model.proj_dim=4"]))


def test_checkpoint_truncation_detected(tmp_path):
    cfg = small_cfg("trainer.steps=2")
    _, st = run(cfg)
    path = tmp_path / "c.insgen"
    checkpoint_save(st, cfg, path)
    raw = path.read_bytes()
    for cut in (len(raw) - 3, len(raw) // 2, 20):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointTruncatedError):
            checkpoint_load(path, cfg)
    damaged = bytearray(raw)
    damaged[-1] ^= 0xFF
    path.write_bytes(bytes(damaged))
    with pytest.raises(CheckpointTruncatedError):
        checkpoint_load(path, cfg)


def test_checkpoint_version_mismatch(tmp_path):
    cfg = small_cfg("trainer.steps=1")
    _, st = run(cfg)
    path = tmp_path / "c.insgen"
    checkpoint_save(st, cfg, path)
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # version field follows the 8-byte magic
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        checkpoint_load(path, cfg)


def test_latest_checkpoint(tmp_path):
    run(small_cfg("trainer.steps=10", "trainer.ckpt_every=4"), out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.insgen"))
    assert names == ["ckpt_000000.insgen", "ckpt_000004.insgen", "ckpt_000008.insgen",
                     "ckpt_000010.insgen"]
    assert latest_checkpoint(tmp_path).name == "ckpt_000010.insgen"


def test_iterate_yields_records_lazily():
    cfg = small_cfg("trainer.steps=10", "trainer.eval_every=5")
    ds = build_dataset(cfg)
    gen = iterate(cfg, ds)
    first = next(gen)
    assert first["step"] == 5
