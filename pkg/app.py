"""
DC-QFA - device-conditioned quantization-for-all policy pipeline
Command launcher for demos, supernet training, distillation, search and export
"""
import glob
import json
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from dotenv import load_dotenv

from core import storage
from core.checkpoint import load_subnet, load_supernet, load_train_state, save_subnet, save_train_state
from core.configspace import SearchSpace, SubnetConfig, config_hash, decode, largest_config, smallest_config
from core.costmodel import (DeviceProfile, generate_synthetic_profiles, load_profiles, jetson_fixture_profile,
                            save_profile, write_profiles)
from core.env import Trajectory, double_integrator, generate_demos
from core.error_handler import (ConfigError, DatasetError, cli_error_handler, exit_code_for, format_error_line,
                                log_activity, setup_logging)
from core.opd import TeacherHandle, compare_horizons_on_linear_system, compare_horizons_on_pushbox, distill
from core.report import build_deployment_report, dominant_bits, summarize_fronts, write_report
from core.search import (front_from_dict, run_search, select_deployment, supernet_fitness, write_front_csv,
                         write_front_json, mixed_precision_sweep)
from core.supernet import Supernet
from core.trainer import evaluate, init_train_state, split_demos, stack_demos, train
from utils import config as settings
from utils.config import RunConfig, artifact_path, load_run_config, setup_directories

# Load environment variables
load_dotenv()


# ===========================
# SHARED HELPERS
# ===========================

def _run_config(ctx: click.Context) -> RunConfig:
    opts = ctx.obj
    overrides = list(opts['overrides'])
    if opts['seed'] is not None:
        overrides.append(f"seed={opts['seed']}")
    if opts['out'] is not None:
        overrides.append(f"out_dir={json.dumps(opts['out'])}")
    cfg = load_run_config(opts['config'], overrides)
    setup_directories(cfg.out_dir)
    return cfg


def _profile_paths(ctx: click.Context, cfg: RunConfig) -> List[str]:
    paths = list(ctx.obj['device_profiles']) or list(cfg.profiles.paths)
    if not paths:
        paths = sorted(glob.glob(os.path.join(cfg.out_dir, settings.PROFILES_FOLDER, '*.json')))
    if not paths:
        raise DatasetError("no device profiles found; run profile-synth or pass --device-profile",
                           error_code="ARTIFACT_MISSING")
    return paths


def _profiles(ctx: click.Context, cfg: RunConfig, device: Optional[str] = None) -> List[DeviceProfile]:
    profiles = load_profiles(_profile_paths(ctx, cfg), cfg.space.to_space())
    if device is not None:
        profiles = [p for p in profiles if p.device_id == device]
        if not profiles:
            raise ConfigError(f"no loaded profile has device id {device}")
    return profiles


def _demos(cfg: RunConfig) -> Tuple[List[Trajectory], List[Trajectory]]:
    path = cfg.demos.path or artifact_path(cfg.out_dir, settings.DEMOS_FILE)
    demos = storage.load_demos(path)
    return split_demos(demos, cfg.demos.val_fraction, cfg.seed)


def _validation_set(cfg: RunConfig) -> Tuple[np.ndarray, np.ndarray]:
    train_demos, val_demos = _demos(cfg)
    return stack_demos(val_demos or train_demos)


def _search_checkpoint(cfg: RunConfig) -> str:
    distilled = artifact_path(cfg.out_dir, settings.DISTILLED_CKPT)
    if cfg.search.use_distilled and os.path.exists(distilled):
        return distilled
    return artifact_path(cfg.out_dir, settings.SUPERNET_CKPT)


def _supernet(cfg: RunConfig) -> Supernet:
    return load_supernet(_search_checkpoint(cfg), cfg.space.to_space(), cfg.model.to_dims())


def _front_path(cfg: RunConfig, device_id: str, ext: str) -> str:
    return artifact_path(cfg.out_dir, settings.FRONTS_FOLDER, f'{device_id}.{ext}')


def _named_config(target: str, space: SearchSpace, supernet: Optional[Supernet]) -> SubnetConfig:
    if target == 'largest':
        return largest_config(space)
    if target == 'smallest':
        return smallest_config(space)
    if target == 'teacher':
        return TeacherHandle(supernet).config
    raise ConfigError(f"unknown target {target}")


# ===========================
# COMMAND GROUP
# ===========================

@click.group()
@click.option('--config', 'config_path', type=click.Path(), default=None, help='Run configuration JSON')
@click.option('--seed', type=int, default=None, help='Override the run seed')
@click.option('--out', type=click.Path(), default=None, help='Output directory')
@click.option('--device-profile', 'device_profiles', multiple=True, type=click.Path(),
              help='Device LUT JSON (repeatable)')
@click.option('--set', 'overrides', multiple=True, help='Override a config key: a.b.c=value')
@click.pass_context
def cli(ctx, config_path, seed, out, device_profiles, overrides):
    """Device-conditioned quantization-for-all policy pipeline"""
    setup_logging()
    ctx.ensure_object(dict)
    ctx.obj.update({'config': config_path, 'seed': seed, 'out': out,
                    'device_profiles': device_profiles, 'overrides': overrides})


@cli.command('gen-demos')
@click.pass_context
@cli_error_handler
def gen_demos(ctx):
    """Collect successful scripted-expert PushBox demonstrations"""
    cfg = _run_config(ctx)
    log_activity('gen-demos', {'n': cfg.demos.n_demos, 'seed': cfg.seed})
    env = cfg.env.to_env()
    demos = generate_demos(env, cfg.demos.n_demos, cfg.seed, show_progress=True)
    path = storage.save_demos(demos, artifact_path(cfg.out_dir, settings.DEMOS_FILE))
    steps = sum(len(t) for t in demos)
    click.echo(f"✅ wrote {len(demos)} demonstrations ({steps} steps) to {path}")


@cli.command('profile-synth')
@click.option('--n', 'n_profiles', type=int, default=None, help='Number of synthetic devices')
@click.pass_context
@cli_error_handler
def profile_synth(ctx, n_profiles):
    """Write synthetic device LUTs and the whole-model fixture profile"""
    cfg = _run_config(ctx)
    n = cfg.profiles.n_synthetic if n_profiles is None else n_profiles
    space, dims = cfg.space.to_space(), cfg.model.to_dims()
    profiles = generate_synthetic_profiles(space, dims, n, cfg.seed)
    paths = write_profiles(profiles, artifact_path(cfg.out_dir, settings.PROFILES_FOLDER))
    for profile, path in zip(profiles, paths):
        click.echo(f"✅ {profile.device_id}: budget {profile.budget_latency_ms:.3f} ms / "
                   f"{profile.budget_memory_bytes} B -> {path}")
    if cfg.profiles.include_jetson_fixture:
        fixture = jetson_fixture_profile(dims)
        path = save_profile(fixture, artifact_path(cfg.out_dir, settings.FIXTURES_FOLDER,
                                                   f'{fixture.device_id}.json'))
        click.echo(f"✅ fixture {fixture.device_id} -> {path}")


@cli.command('train')
@click.option('--steps', type=int, default=None, help='Override train.steps')
@click.pass_context
@cli_error_handler
def train_cmd(ctx, steps):
    """Stage I: quantization-aware sandwich training of the supernet"""
    cfg = _run_config(ctx)
    train_cfg = cfg.train_config()
    if steps is not None and steps < 0:
        raise ConfigError(f"--steps must be >= 0, got {steps}")
    profiles = _profiles(ctx, cfg)
    train_demos, _ = _demos(cfg)
    log_activity('train', {'steps': train_cfg.steps if steps is None else steps,
                           'devices': [p.device_id for p in profiles]})
    state = init_train_state(cfg.space.to_space(), cfg.model.to_dims(), train_cfg, profiles, train_demos)
    rows = train(state, train_cfg, steps=steps, metrics_path=artifact_path(cfg.out_dir, settings.TRAIN_METRICS),
                 show_progress=True)
    path = save_train_state(state, artifact_path(cfg.out_dir, settings.SUPERNET_CKPT), extra={'phase': 'train'})
    last = rows[-1]['L_policy'] if rows else float('nan')
    click.echo(f"✅ trained {state.step} steps (last L_policy {last:.5f}); checkpoint {path}")


@cli.command('distill')
@click.option('--steps', type=int, default=None, help='Override opd.steps')
@click.pass_context
@cli_error_handler
def distill_cmd(ctx, steps):
    """Continue training with multi-step on-policy distillation"""
    cfg = _run_config(ctx)
    profiles = _profiles(ctx, cfg)
    train_demos, _ = _demos(cfg)
    obs, act = stack_demos(train_demos)
    state = load_train_state(artifact_path(cfg.out_dir, settings.SUPERNET_CKPT), profiles, obs, act,
                             cfg.space.to_space(), cfg.model.to_dims())
    opd_cfg = cfg.opd_config()
    log_activity('distill', {'steps': opd_cfg.steps if steps is None else steps, 'k_max': opd_cfg.k_max})
    rows = distill(state, cfg.train_config(), opd_cfg, cfg.env.to_env(), steps=steps,
                   metrics_path=artifact_path(cfg.out_dir, settings.DISTILL_METRICS), show_progress=True)
    path = save_train_state(state, artifact_path(cfg.out_dir, settings.DISTILLED_CKPT), extra={'phase': 'distill'})
    final_k = rows[-1]['K'] if rows else 0
    click.echo(f"✅ distilled {len(rows)} config-steps (final K={final_k}); checkpoint {path}")


@cli.command('search')
@click.option('--device', default=None, help='Only search for this device id')
@click.pass_context
@cli_error_handler
def search_cmd(ctx, device):
    """Stage II: constrained NSGA-II per device"""
    cfg = _run_config(ctx)
    supernet = _supernet(cfg)
    val_obs, val_act = _validation_set(cfg)
    fitness = supernet_fitness(supernet, val_obs, val_act)
    params = cfg.search_params()
    for profile in _profiles(ctx, cfg, device):
        log_activity('search', {'device': profile.device_id, 'objective': params.objective})
        result = run_search(fitness, profile, supernet.space, supernet.dims, params, cfg.seed)
        write_front_csv(result.front, _front_path(cfg, profile.device_id, 'csv'))
        write_front_json(result.front, _front_path(cfg, profile.device_id, 'json'), profile.device_id,
                         params.objective)
        marker = "✅" if result.front.feasible else "⚠️"
        click.echo(f"{marker} {profile.device_id}: {len(result.front)} front members from "
                   f"{len(result.archive)} evaluated configs (feasible={result.front.feasible})")


def _evaluate_policy(cfg: RunConfig, policy) -> Dict:
    return evaluate(policy, cfg.env.to_env(), cfg.eval.n_episodes, seed=cfg.eval.seed).to_dict()


@cli.command('eval')
@click.option('--target', type=click.Choice(['largest', 'smallest', 'teacher']), default=None)
@click.option('--genome', default=None, help='Dash-separated genome, e.g. 1-2-1-0-0-...')
@click.option('--subnet', 'subnet_path', type=click.Path(), default=None, help='Exported subnet checkpoint')
@click.option('--name', default=None, help='Output name under eval/')
@click.pass_context
@cli_error_handler
def eval_cmd(ctx, target, genome, subnet_path, name):
    """Closed-loop PushBox evaluation of one configuration"""
    cfg = _run_config(ctx)
    chosen = [x for x in (target, genome, subnet_path) if x is not None]
    if len(chosen) != 1:
        raise ConfigError("pass exactly one of --target, --genome or --subnet")
    space, dims = cfg.space.to_space(), cfg.model.to_dims()
    if subnet_path is not None:
        subnet = load_subnet(subnet_path, space, dims)
        config, policy = subnet.config, subnet.predict
        label = name or f'subnet-{config_hash(config)}'
    else:
        genes = None
        if genome is not None:
            try:
                genes = [int(g) for g in genome.split('-')]
            except ValueError:
                raise ConfigError(f"malformed genome '{genome}'")
        supernet = _supernet(cfg)
        config = decode(genes, space) if genes is not None else _named_config(target, space, supernet)
        label = name or (target if target is not None else config_hash(config))

        def policy(o, _c=config):
            return supernet.predict(_c, o)
    result = _evaluate_policy(cfg, policy)
    result.update({'config_id': config_hash(config), 'seed': cfg.eval.seed})
    path = storage.save_json(result, artifact_path(cfg.out_dir, settings.EVAL_FOLDER, f'{label}.json'))
    click.echo(f"✅ {label}: success {result['successes']}/{result['n_episodes']} "
               f"({result['success_rate']:.2%}), mean length {result['mean_length']:.1f} -> {path}")


@cli.command('export')
@click.option('--device', default=None, help='Only export this device id')
@click.option('--rule', type=click.Choice(['min-loss-under-budget', 'knee']), default=None)
@click.option('--skip-eval', is_flag=True, help='Write the report without closed-loop evaluation')
@click.pass_context
@cli_error_handler
def export_cmd(ctx, device, rule, skip_eval):
    """Stage III: extract the selected subnet per device and write its deployment report"""
    cfg = _run_config(ctx)
    supernet = _supernet(cfg)
    space, dims = supernet.space, supernet.dims
    rule = rule or cfg.search.selection
    val_obs, val_act = _validation_set(cfg)
    fitness = supernet_fitness(supernet, val_obs, val_act)
    teacher_eval = None
    if not skip_eval:
        teacher_config = TeacherHandle(supernet).config
        teacher_eval = _evaluate_policy(cfg, lambda o: supernet.predict(teacher_config, o))
    for profile in _profiles(ctx, cfg, device):
        front_json = _front_path(cfg, profile.device_id, 'json')
        front = front_from_dict(storage.load_json(front_json), space)
        chosen = select_deployment(front, rule)
        subnet = supernet.extract(chosen.config)
        out_dir = artifact_path(cfg.out_dir, settings.EXPORT_FOLDER, profile.device_id)
        save_subnet(subnet, os.path.join(out_dir, 'subnet.ckpt'), space,
                    extra={'device_id': profile.device_id, 'rule': rule})
        evaluation = None if skip_eval else _evaluate_policy(cfg, subnet.predict)
        report = build_deployment_report(profile, chosen.config, space, dims, val_loss=fitness(chosen.config),
                                         evaluation=evaluation, teacher_evaluation=teacher_eval)
        report['selection_rule'] = rule
        report['dominant_weight_bits'] = dominant_bits(chosen.config)
        write_report(report, os.path.join(out_dir, 'report.json'))
        ok = report['constraints']['feasible']
        click.echo(f"{'✅' if ok else '❌'} {profile.device_id}: config {report['config_id']} "
                   f"latency {report['costs']['latency_ms']:.3f}/{profile.budget_latency_ms:.3f} ms, "
                   f"memory {report['costs']['memory_bytes']:.0f}/{profile.budget_memory_bytes} B")


@cli.command('pareto-csv')
@click.pass_context
@cli_error_handler
def pareto_csv(ctx):
    """Re-emit every front CSV from its JSON and write a per-device summary"""
    cfg = _run_config(ctx)
    space = cfg.space.to_space()
    paths = sorted(glob.glob(os.path.join(cfg.out_dir, settings.FRONTS_FOLDER, '*.json')))
    if not paths:
        raise DatasetError("no fronts found; run search first", error_code="ARTIFACT_MISSING")
    fronts = {}
    for path in paths:
        data = storage.load_json(path)
        fronts[data['device_id']] = data
        write_front_csv(front_from_dict(data, space), _front_path(cfg, data['device_id'], 'csv'))
    summary = summarize_fronts(fronts)
    out = storage.write_csv(summary.to_dict('records'),
                            artifact_path(cfg.out_dir, settings.FRONTS_FOLDER, 'summary.csv'),
                            columns=list(summary.columns))
    click.echo(f"✅ re-emitted {len(paths)} fronts; summary {out}")


def _opd_trend_pushbox(ctx: click.Context, cfg: RunConfig):
    o = cfg.opd
    profiles = _profiles(ctx, cfg)
    train_demos, _ = _demos(cfg)
    obs, act = stack_demos(train_demos)
    path = artifact_path(cfg.out_dir, settings.SUPERNET_CKPT)
    space, dims = cfg.space.to_space(), cfg.model.to_dims()
    log_activity('opd-trend', {'env': 'pushbox', 'seeds': o.trend_seeds, 'steps': o.trend_pushbox_steps})

    def load_state():
        return load_train_state(path, profiles, obs, act, space, dims)
    comparison = compare_horizons_on_pushbox(
        load_state, cfg.train_config(), cfg.opd_config(), cfg.env.to_env(), n_seeds=o.trend_seeds,
        steps=o.trend_pushbox_steps, n_episodes=o.trend_pushbox_episodes, eval_seed=cfg.eval.seed,
        show_progress=True)
    frame = comparison.to_frame()
    storage.write_csv(frame.to_dict('records'),
                      artifact_path(cfg.out_dir, settings.EVAL_FOLDER, 'opd_trend_pushbox.csv'),
                      columns=list(frame.columns))
    summary = comparison.summary()
    storage.save_json(summary, artifact_path(cfg.out_dir, settings.EVAL_FOLDER, 'opd_trend_pushbox.json'))
    marker = "✅" if comparison.mean_success_multi_step >= comparison.mean_success_single_step else "⚠️"
    click.echo(f"{marker} PushBox success K=1 {comparison.mean_success_single_step:.2%} vs "
               f"K={o.k_max} {comparison.mean_success_multi_step:.2%} "
               f"({summary['wins']} wins, {summary['ties']} ties, {summary['losses']} losses)")


@cli.command('opd-trend')
@click.option('--env', 'env_name', type=click.Choice(['linear', 'pushbox']), default='linear',
              help='Linear-system accumulation gap, or PushBox success after distillation')
@click.pass_context
@cli_error_handler
def opd_trend(ctx, env_name):
    """K=1 against multi-step distillation: accumulation gap on the linear oracle, or PushBox success"""
    cfg = _run_config(ctx)
    o = cfg.opd
    if env_name == 'pushbox':
        _opd_trend_pushbox(ctx, cfg)
        return
    comparison = compare_horizons_on_linear_system(
        double_integrator(), n_seeds=o.trend_seeds, k_max=o.k_max, T=o.trend_T, steps=o.trend_steps,
        lr=o.trend_lr, perturbation=o.trend_perturbation, rollouts=o.rollouts, show_progress=True)
    frame = comparison.to_frame()
    storage.write_csv(frame.to_dict('records'), artifact_path(cfg.out_dir, settings.EVAL_FOLDER, 'opd_trend.csv'),
                      columns=list(frame.columns))
    summary = comparison.summary()
    storage.save_json(summary, artifact_path(cfg.out_dir, settings.EVAL_FOLDER, 'opd_trend.json'))
    click.echo(f"✅ K={o.k_max} beat K=1 on {summary['wins']}/{summary['n_seeds']} seeds "
               f"(sign test p={summary['p_value']:.4f})")


@cli.command('mixed-precision')
@click.option('--n', 'n_samples', type=int, default=None, help='Number of INT4/INT8 configs to sample')
@click.pass_context
@cli_error_handler
def mixed_precision(ctx, n_samples):
    """Average bit-width against validation loss for INT4/INT8 mixed configs"""
    cfg = _run_config(ctx)
    supernet = _supernet(cfg)
    val_obs, val_act = _validation_set(cfg)
    n = cfg.search.mixed_precision_samples if n_samples is None else n_samples
    frame = mixed_precision_sweep(supernet_fitness(supernet, val_obs, val_act), supernet.space,
                                  supernet.dims, n, cfg.seed)
    path = storage.write_csv(frame.to_dict('records'),
                             artifact_path(cfg.out_dir, settings.EVAL_FOLDER, 'mixed_precision.csv'),
                             columns=list(frame.columns))
    click.echo(f"✅ {len(frame)} mixed-precision configs -> {path}")


def main(argv: Optional[Sequence[str]] = None):
    """Entry point; argument parsing failures follow the same one-line error contract as commands"""
    try:
        cli.main(args=argv, prog_name='dcqfa', standalone_mode=False)
    except click.ClickException as e:
        error = ConfigError(e.format_message(), error_code="USAGE_ERROR")
        print(format_error_line(error), file=sys.stderr)
        sys.exit(exit_code_for(error))
    except click.exceptions.Abort:
        print(format_error_line(ConfigError("aborted", error_code="USAGE_ERROR")), file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main(sys.argv[1:])
