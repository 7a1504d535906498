import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moma.errors import ConfigError, ContractError
from moma.fusion import KINDS
from moma.harness import ablation, bench
from moma.harness.config import (ExperimentConfig, load_checkpoint, load_config, parse_config,
                                 render_config, save_checkpoint)
from moma.harness.data import SyntheticTask, gen_task, render_motion
from moma.model import MoMaModel

from conftest import CONFIGS


# -- data ---------------------------------------------------------------------------

def test_reversed_up_clip_is_a_down_clip():
    start = (5.0, 7.0)
    up = render_motion(0, start, 6, 12)
    # the last frame of "up" is the first frame of the matching "down" clip
    down = render_motion(1, (start[0] - 5.0, start[1]), 6, 12)
    np.testing.assert_allclose(up[::-1], down, atol=1e-12)


def test_reversed_left_clip_is_a_right_clip():
    left = render_motion(2, (4.0, 9.0), 5, 10)
    right = render_motion(3, (4.0, 5.0), 5, 10)
    np.testing.assert_allclose(left[::-1], right, atol=1e-12)


def test_static_task_frames_identical_at_zero_noise():
    ds = gen_task(SyntheticTask("static", samples=8, frames=5, image=8, noise=0.0))
    perm = np.random.default_rng(0).permutation(5)
    assert np.array_equal(ds.pixels, ds.pixels[:, perm])


@given(st.integers(1, 30), st.sampled_from(["motion", "static"]))
@settings(max_examples=15, deadline=None)
def test_label_balance(k, kind):
    ds = gen_task(SyntheticTask(kind, samples=4 * k, frames=2, image=4))
    assert np.bincount(ds.labels, minlength=4).tolist() == [k] * 4


def test_gen_task_deterministic_and_split():
    t = SyntheticTask("motion", samples=20, frames=3, image=6, seed=4)
    a, b = gen_task(t), gen_task(t)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.labels, b.labels)
    tr, va = a.split()
    assert (len(tr), len(va)) == (16, 4)
    assert not np.array_equal(gen_task(dataclasses.replace(t, seed=5)).pixels, a.pixels)


def test_task_aliases_and_bad_kind():
    assert SyntheticTask("motion-direction").kind == "motion"
    assert SyntheticTask("static-texture").kind == "static"
    with pytest.raises(ConfigError):
        SyntheticTask("colour")


# -- config and checkpoints ----------------------------------------------------------------

def test_config_round_trip():
    cfg = load_config(CONFIGS / "desk_motion.cfg")
    assert parse_config(render_config(cfg)) == cfg
    assert cfg.task().frames == cfg.model.frames


def test_config_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match=r"unknown key\(s\) depthh in \[model\]; valid keys: .*pattern"):
        parse_config("[model]\ndepthh = 3\n")


def test_config_errors():
    with pytest.raises(ConfigError, match="config not found"):
        load_config("missing.cfg")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[optimiser]\nlr = 1\n")
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config("[train]\nepochs = many\n")


def test_checkpoint_round_trip_and_tamper(tmp_path, rng):
    cfg = load_config(CONFIGS / "smoke.cfg")
    m = MoMaModel(cfg.model, seed=0)
    for mods in m.adapters:
        for a in mods:
            a.ssm.out_w.data = rng.normal(size=a.ssm.out_w.shape)
    save_checkpoint(tmp_path / "ck", m, cfg)
    back, cfg2 = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    x = rng.normal(size=(4, 8, 8))
    assert np.array_equal(back.forward(x).data, m.forward(x).data)

    m.layers[0].wq.data = m.layers[0].wq.data + 1e-3
    tensors, roles = m.state()
    from moma.core.serialize import save_manifest
    save_manifest(tmp_path / "ck", tensors, roles)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "ck")


# -- bench ---------------------------------------------------------------------------

TINY = bench.BenchSetup(grid=4, dim=8, heads=2, window="2x2", state=2, repeats=3)


def test_bench_rows_flops_and_memory():
    rep = bench.bench_scaling(["full", "divide"], [1, 2, 4], TINY)
    assert len(rep.rows) == 6
    for r in rep.rows:
        assert r.flops == bench.expected_flops(r.method, r.frames, TINY)
        assert r.tokens == r.frames * 16 and r.time_s > 0 and not r.oom
    for m in ("full", "divide"):
        peaks = [r.peak_bytes for r in rep.method_rows(m)]
        assert peaks == sorted(peaks)
    assert rep.slope("full", "flops") > rep.slope("divide", "flops")


def test_bench_oom_row_and_csv():
    setup = dataclasses.replace(TINY, memory_limit=8 * 2 * 32 * 32)
    rep = bench.bench_scaling(["full-attn"], [1, 2, 4], setup)
    assert [r.oom for r in rep.rows] == [False, False, True]
    text = rep.to_csv(include_time=False)
    lines = text.splitlines()
    assert lines[0] == bench.SCHEMA and lines[1] == ",".join(bench.COLUMNS)
    assert lines[-1].startswith("full,4,64,") and lines[-1].endswith(",,,1")
    again = bench.bench_scaling(["full"], [1, 2, 4], setup)
    assert [(r.frames, r.flops, r.oom) for r in again.rows] == [(r.frames, r.flops, r.oom) for r in rep.rows]


def test_bench_rejects_bad_input():
    with pytest.raises(ConfigError):
        bench.bench_scaling(["full"], [4, 2], TINY)
    with pytest.raises(ConfigError):
        bench.canonical_method("sparse")


# -- ablation -----------------------------------------------------------------------------

def test_fusion_matrix_rows():
    cells = ablation.matrix_cells("fusion", ExperimentConfig())
    assert sorted(c.name for c in cells) == sorted(["skip", "add", "max", "concat", "raw_adan", "seqmod"])
    assert set(KINDS) == {c.name for c in cells}


def test_window_matrix_scaled_to_desk_grid():
    cells = {c.name: c.changes["window"] for c in ablation.window_cells(8, 8)}
    assert cells == {"full": "frame", "16x16": "4x4", "8x8": "2x2", "4x4x4": "2x1x1", "4x4": "1x1"}
    same = {c.name: c.changes["window"] for c in ablation.window_cells(16, 32)}
    assert same == {"full": "frame", "16x16": "16x16", "8x8": "8x8", "4x4x4": "4x4x4", "4x4": "4x4"}


def test_pattern_matrix_contains_reference_strings():
    pats = [c.changes["pattern"] for c in ablation.pattern_cells(12)]
    for s in ("[TM]12", "[T]12[M]12", "[T]6[TMM]6", "[TTMM]6"):
        assert s in pats


def _smoke():
    cfg = load_config(CONFIGS / "smoke.cfg")
    cfg.train = dataclasses.replace(cfg.train, epochs=1)
    return cfg


def test_ablation_failing_cell_continues():
    cfg = _smoke()
    cells = [ablation.Cell("window", "bad", {"window": "3x3"}), ablation.Cell("window", "good", {"window": "1x1"})]
    data = gen_task(cfg.task()).split()
    rows = [ablation.run_cell(c, cfg, 0, data) for c in cells]
    assert rows[0].status.startswith("error: WindowError")
    assert rows[1].status == "ok" and 0.0 <= rows[1].val_acc <= 1.0 and rows[1].flops > 0


def test_ablation_csv_deterministic():
    cfg = _smoke()
    a = ablation.run_ablation("fusion", cfg, seeds=(0, 1), cells=["skip", "seqmod"])
    b = ablation.run_ablation("fusion", cfg, seeds=(0, 1), cells=["skip", "seqmod"])
    assert a.to_csv() == b.to_csv()
    assert len(a.rows) == 4 and a.to_csv().splitlines()[0] == ablation.SCHEMA
    assert len(a.accuracies("seqmod")) == 2
    skip, seqmod = (r for r in a.rows if r.seed == 0)
    assert seqmod.trainable_params == skip.trainable_params


def test_ablation_unknown_cell():
    with pytest.raises(ValueError, match="unknown fusion cells"):
        ablation.run_ablation("fusion", _smoke(), cells=["mul"])
