"""
Test script for multi-step on-policy distillation
"""
import sys
import os
import tempfile

import numpy as np
import pandas as pd
import pytest

# Add repository root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import costmodel as cm
from core import env as envs
from core import numerics as nx
from core import opd
from core import trainer as tr
from core.checkpoint import load_train_state, save_train_state
from core.configspace import LayerChoice, ModelDims, SearchSpace, SubnetConfig
from core.error_handler import ConfigError
from core.numerics import Tape, Tensor
from core.opd import OpdConfig, TeacherHandle
from core.supernet import Supernet, calibrate_bank
from core.trainer import TrainConfig

SLOW = os.getenv('DCQFA_SLOW') == '1'
ENV = envs.PushBoxEnv(max_steps=80)


def _tiny():
    space = SearchSpace(n_layers=2, r_menu=(1, 2), h_menu=(0.5, 1.0), bw_menu=(4, 8, 16),
                        ba_menu=(4, 8, 16), d_min=1)
    dims = ModelDims(d_model=16, n_heads=2, head_dim=8, r_max=2.0)
    return space, dims


def _state():
    space, dims = _tiny()
    cfg = TrainConfig(batch_size=8, warmup_steps=5, calibration_samples=32, log_every=0,
                      check_gradient_masks=True)
    demos = envs.generate_demos(envs.PushBoxEnv(), 3, seed=2)
    profiles = cm.generate_synthetic_profiles(space, dims, n=2, seed=0)
    return tr.init_train_state(space, dims, cfg, profiles, demos), cfg


# ===========================
# HORIZON AND WEIGHTS
# ===========================

def test_horizon_endpoints_and_midpoint():
    cfg = OpdConfig(k_min=1, k_max=9)
    assert opd.horizon(0.0, cfg) == 1
    assert opd.horizon(1.0, cfg) == 9
    assert opd.horizon(0.5, cfg) == 5


def test_horizon_is_monotone():
    cfg = OpdConfig(k_min=2, k_max=8)
    ks = [opd.horizon(p, cfg) for p in np.linspace(0, 1, 101)]
    assert all(b >= a for a, b in zip(ks, ks[1:]))
    assert opd.horizon(0.7, OpdConfig(k_min=1, k_max=8, schedule='constant')) == 8


def test_step_weights():
    assert np.array_equal(opd.step_weights(3, OpdConfig()), [1.0, 1.0, 1.0])
    assert np.allclose(opd.step_weights(3, OpdConfig(weighting='discount', discount=0.5)), [1.0, 0.5, 0.25])


def test_opd_config_validation():
    with pytest.raises(ConfigError):
        OpdConfig(k_min=0)
    with pytest.raises(ConfigError):
        OpdConfig(k_min=5, k_max=3)
    with pytest.raises(ConfigError):
        OpdConfig(gamma=-1.0)
    with pytest.raises(ConfigError):
        OpdConfig(schedule='cosine')


# ===========================
# LOSS COMPOSITION
# ===========================

def test_combine_step_losses_example():
    with nx.float64_shadow():
        loss = opd.combine_step_losses([Tensor(0.04), Tensor(0.16)], [1.0, 1.0])
    assert loss.item() == pytest.approx(0.10)
    with pytest.raises(ConfigError):
        opd.combine_step_losses([], [])


def test_total_loss_examples():
    assert opd.total_loss(0.3, 0.1, 0.0) == pytest.approx(0.3)
    assert opd.total_loss(0.3, 0.1, 1.0) == pytest.approx(0.4)
    assert opd.total_loss(0.0, 0.05, 2.0) == pytest.approx(0.1)


def test_identical_student_has_zero_loss():
    system = envs.double_integrator()
    env = envs.LinearSystemEnv(system)
    starts = np.stack([env.reset(np.random.default_rng(s)) for s in range(4)])
    for K in (1, 3, 8):
        loss = opd.opd_loss(lambda o: Tensor(system.teacher_action(o)), system.teacher_action, env, K, starts)
        assert loss.item() == 0.0


def test_single_step_is_distillation_at_the_start_state():
    system = envs.double_integrator()
    env = envs.LinearSystemEnv(system)
    starts = np.stack([env.reset(np.random.default_rng(s)) for s in range(4)])
    student = envs.LinearStudent(system, 8, 8).calibrate(starts)
    with nx.float64_shadow():
        loss = opd.opd_loss(lambda o: student.forward(o), system.teacher_action, env, 1, starts)
        expected = np.mean((student.act(starts) - system.teacher_action(starts)) ** 2)
    assert loss.item() == pytest.approx(expected, rel=1e-6)
    with pytest.raises(ConfigError):
        opd.opd_loss(lambda o: student.forward(o), system.teacher_action, env, 0, starts)


def test_teacher_is_full_precision_largest_config():
    space, dims = _tiny()
    teacher = TeacherHandle(Supernet(space, dims))
    assert all(c.m == 1 and c.bw == 16 and c.ba == 16 and c.r == 2.0 and c.h == 1.0
               for c in teacher.config.layers)


def test_gradients_never_leave_the_student_slices():
    space, dims = _tiny()
    student_net = Supernet(space, dims, seed=1)
    calibrate_bank(student_net, envs.PushBoxEnv().reset(np.random.default_rng(0))[None, :].repeat(4, 0))
    config = SubnetConfig((LayerChoice(1, 1.0, 0.5, 4, 4), LayerChoice(0, 1.0, 0.5, 4, 4)))
    starts = np.stack([ENV.reset(np.random.default_rng(s)) for s in range(3)])
    mask = student_net.active_masks(config)
    values = []
    for teacher_seed in (2, 3):
        teacher = TeacherHandle(Supernet(space, dims, seed=teacher_seed))
        leaves = student_net.leaves()
        with Tape() as tape:
            loss = opd.opd_loss(lambda o: student_net.forward(config, o, leaves=leaves), teacher.act, ENV, 3, starts)
        grads = tape.backward(loss, [leaves[n] for n in student_net.names])
        for name, g in zip(student_net.names, grads):
            assert not np.any(g[~mask[name]]), name
        values.append(loss.item())
    assert values[0] != values[1]


def test_seeded_loss_repeats_for_the_same_seed():
    space, dims = _tiny()
    student_net = Supernet(space, dims, seed=1)
    calibrate_bank(student_net, np.stack([ENV.reset(np.random.default_rng(s)) for s in range(8)]))
    teacher = TeacherHandle(Supernet(space, dims, seed=2))
    config = SubnetConfig((LayerChoice(1, 1.0, 0.5, 4, 4), LayerChoice(1, 2.0, 1.0, 8, 8)))
    cfg = OpdConfig(k_min=1, k_max=3, rollouts=3)
    first = opd.seeded_opd_loss(student_net, config, teacher.act, ENV, 3, seed=7, cfg=cfg).item()
    again = opd.seeded_opd_loss(student_net, config, teacher.act, ENV, 3, seed=7, cfg=cfg).item()
    other = opd.seeded_opd_loss(student_net, config, teacher.act, ENV, 3, seed=8, cfg=cfg).item()
    assert first == again
    assert np.isfinite(first) and first > 0.0
    assert other != first


# ===========================
# SUPERNET DISTILLATION
# ===========================

def test_distill_step_rows():
    state, cfg = _state()
    opd_cfg = OpdConfig(k_min=1, k_max=3, rollouts=2, gamma=1.0)
    rows = opd.distill_step(state, cfg, opd_cfg, ENV, progress=1.0)
    assert all(list(r) == opd.DISTILL_COLUMNS for r in rows)
    assert all(r['K'] == 3 for r in rows)
    for r in rows:
        assert r['L_total'] == pytest.approx(r['L_base'] + opd_cfg.gamma * r['L_OPD'])
    assert any(r['L_OPD'] > 0 for r in rows)
    assert state.step == 1


def test_zero_gamma_skips_distillation():
    state, cfg = _state()
    rows = opd.distill_step(state, cfg, OpdConfig(gamma=0.0, k_max=2, rollouts=2), ENV, progress=0.0)
    assert all(r['L_OPD'] == 0.0 and r['L_total'] == r['L_base'] for r in rows)


def test_distill_grows_the_horizon_and_writes_metrics():
    state, cfg = _state()
    opd_cfg = OpdConfig(k_min=1, k_max=4, rollouts=2, steps=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'distill_metrics.csv')
        rows = opd.distill(state, cfg, opd_cfg, ENV, metrics_path=path)
        frame = pd.read_csv(path)
    assert list(frame.columns) == opd.DISTILL_COLUMNS
    ks = [r['K'] for r in rows]
    assert ks[0] == 1 and ks[-1] == 4
    assert all(b >= a for a, b in zip(ks, ks[1:]))


# ===========================
# LINEAR-SYSTEM HORIZON TREND
# ===========================

def test_sign_test_p_values():
    assert opd.sign_test_p_value(10, 10) == pytest.approx(1 / 1024)
    assert opd.sign_test_p_value(9, 10) == pytest.approx(11 / 1024)
    assert opd.sign_test_p_value(9, 10) < 0.05 < opd.sign_test_p_value(8, 10)
    assert opd.sign_test_p_value(0, 10) == pytest.approx(1.0)


def test_fine_tuning_reduces_the_gap():
    system = envs.double_integrator()
    env = envs.LinearSystemEnv(system, max_steps=30)
    rng = np.random.default_rng(4)
    student = envs.LinearStudent(system, 4, 4, -system.G.T + rng.uniform(-1.0, 1.0, size=system.G.T.shape))
    student.calibrate(np.stack([env.reset(rng) for _ in range(64)]))
    starts = [env.reset(np.random.default_rng(100 + j)) for j in range(8)]

    def mean_gap(s):
        return np.mean([envs.accumulation_gap(system, system.teacher_action, s.act, 30, x0) for x0 in starts])
    before = mean_gap(student)
    tuned = opd.fine_tune_linear_student(student.copy(), env, OpdConfig(k_min=1, k_max=4, rollouts=8),
                                         steps=60, lr=0.05, seed=0)
    assert mean_gap(tuned) < before


def test_horizon_comparison_report():
    comparison = opd.compare_horizons_on_linear_system(envs.double_integrator(), n_seeds=2, k_max=4, T=20,
                                                       steps=10, rollouts=4, eval_starts=4)
    frame = comparison.to_frame()
    assert list(frame.columns) == ['seed', 'gap_k1', 'gap_k4', 'multi_step_wins']
    summary = comparison.summary()
    assert summary['n_seeds'] == 2 and summary['wins'] == comparison.wins
    assert np.isfinite(summary['mean_gap_k1'])


@pytest.mark.skipif(not SLOW, reason="set DCQFA_SLOW=1 for the full horizon trend")
def test_multi_step_horizon_beats_single_step():
    comparison = opd.compare_horizons_on_linear_system(envs.double_integrator(), n_seeds=10, k_max=8, T=50)
    assert comparison.mean_gap_multi_step < comparison.mean_gap_single_step
    assert comparison.p_value < 0.05


# ===========================
# PUSHBOX HORIZON EXPERIMENT
# ===========================

def _saved_state_loader(tmp, train_steps=0):
    state, cfg = _state()
    if train_steps:
        tr.train(state, cfg, steps=train_steps)
    path = save_train_state(state, os.path.join(tmp, 'supernet.ckpt'))

    def load_state():
        return load_train_state(path, state.profiles, state.obs, state.actions, state.space, state.supernet.dims)
    return load_state, cfg


def test_pushbox_horizon_comparison_report():
    env = envs.PushBoxEnv(max_steps=20)
    opd_cfg = OpdConfig(k_min=1, k_max=3, rollouts=2)
    with tempfile.TemporaryDirectory() as tmp:
        load_state, cfg = _saved_state_loader(tmp)
        runs = [opd.compare_horizons_on_pushbox(load_state, cfg, opd_cfg, env, n_seeds=2, steps=2, n_episodes=2)
                for _ in range(2)]
    comparison = runs[0]
    frame = comparison.to_frame()
    assert list(frame.columns) == ['seed', 'success_k1', 'success_k3', 'outcome']
    assert comparison.wins + comparison.ties + comparison.losses == 2
    summary = comparison.summary()
    assert summary['n_seeds'] == 2 and summary['n_episodes'] == 2 and summary['k_max'] == 3
    assert summary['student_config_id']
    assert 0.0 <= summary['mean_success_k1'] <= 1.0
    pd.testing.assert_frame_equal(frame, runs[1].to_frame())


def test_pushbox_horizon_comparison_rejects_empty_runs():
    with tempfile.TemporaryDirectory() as tmp:
        load_state, cfg = _saved_state_loader(tmp)
        with pytest.raises(ConfigError):
            opd.compare_horizons_on_pushbox(load_state, cfg, OpdConfig(), ENV, n_seeds=0)


@pytest.mark.skipif(not SLOW, reason="set DCQFA_SLOW=1 for the PushBox horizon comparison")
def test_multi_step_distillation_keeps_pushbox_success():
    opd_cfg = OpdConfig(k_min=1, k_max=4, rollouts=4)
    with tempfile.TemporaryDirectory() as tmp:
        load_state, cfg = _saved_state_loader(tmp, train_steps=200)
        comparison = opd.compare_horizons_on_pushbox(load_state, cfg, opd_cfg, ENV, n_seeds=10, steps=20,
                                                     n_episodes=20)
    assert len(comparison.trials) == 10
    assert comparison.mean_success_multi_step >= comparison.mean_success_single_step


def main():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    if not SLOW:
        slow = {'test_multi_step_horizon_beats_single_step', 'test_multi_step_distillation_keeps_pushbox_success'}
        tests = [(n, f) for n, f in tests if n not in slow]
    passed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
    print(f"\n📊 Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
