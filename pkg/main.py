#!/usr/bin/env python3
"""
GenRL desk-scale pipeline - Main Entry Point

Collect reward-free data, train the world model, ground prompts into latent
targets and learn behaviors in imagination.
"""

import sys
import argparse
from dotenv import load_dotenv

from genrl.config import load_config
from genrl.errors import GenRLError
from genrl.logger import log_error, set_quiet
from genrl.pipeline import GenRLPipeline


def _add_prompt_args(p):
    p.add_argument('--prompt', '-p', help='Language prompt id from the prompt registry')
    p.add_argument('--video-task', help='Use an expert video window of this task as the prompt')
    p.add_argument('--no-aligner', action='store_true', help='Skip the aligner on the prompt embedding')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='GenRL: world-model grounding of multimodal prompts')
    parser.add_argument('--config', '-c', default=None, help='Config file (INI sections, key = value)')
    parser.add_argument('--run-dir', default=None, help='Run directory (overrides run.run_dir)')
    parser.add_argument('--quiet', '-q', action='store_true', help='Only print errors and the final summary')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('collect', help='Collect a reward-free episode dataset')
    p.add_argument('--mix', help="Policy mix, e.g. 'random:0.5,expert_reach_east:0.5'")
    p.add_argument('--episodes', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', help='Dataset file (default run.dataset)')

    p = sub.add_parser('calibrate-anchors', help='Compute random/expert score anchors per task')
    p.add_argument('--episodes', type=int)

    p = sub.add_parser('train-wm', help='Train the world model')
    p.add_argument('--steps', type=int)
    p.add_argument('--resume', action='store_true', help='Continue from the saved checkpoint')

    p = sub.add_parser('train-ground', help='Train connector and aligner')
    p.add_argument('--steps', type=int)
    p.add_argument('--resume', action='store_true', help='Continue from the saved checkpoint')

    p = sub.add_parser('train-agent', help='Learn a behavior for a prompt in imagination')
    _add_prompt_args(p)
    p.add_argument('--mode', choices=['offline', 'datafree'])
    p.add_argument('--reward', choices=['genrl', 'wmclip'])
    p.add_argument('--steps', type=int)
    p.add_argument('--tag', help='Policy checkpoint tag')

    p = sub.add_parser('train-revconn', help='Train the reversed connector for the WM-CLIP baseline')
    p.add_argument('--steps', type=int)

    p = sub.add_parser('eval', help='Evaluate a policy in the environment')
    p.add_argument('--policy', required=True, help='Policy checkpoint path or tag, or expert / random')
    p.add_argument('--task', help='Task id (defaults to the policy prompt task)')
    p.add_argument('--episodes', type=int)

    p = sub.add_parser('decode-prompt', help='Decode the grounded targets of a prompt')
    _add_prompt_args(p)
    p.add_argument('--out', help='Output CSV')

    p = sub.add_parser('ablate-data', help='Train per data subset and score data-free agents on all tasks')
    p.add_argument('--subsets', nargs='+', required=True, help="Subsets like 'random' or 'random+expert_run_fast'")
    p.add_argument('--tasks', nargs='+')

    p = sub.add_parser('ablate-temporal', help='Compare alignment windows from phase-shifted starts')
    p.add_argument('--prompt', '-p', required=True)
    p.add_argument('--b', type=int, nargs='+', dest='b_values')
    p.add_argument('--steps', type=int)

    sub.add_parser('gap-stats', help='Print the paired language/vision cosine per prompt')
    sub.add_parser('status', help='Show which stages of the run exist')
    sub.add_parser('report', help='Render report.md from the run CSVs')
    return parser


def dispatch(pipeline: GenRLPipeline, args) -> dict:
    cmd = args.command
    aligner = False if getattr(args, 'no_aligner', False) else None
    if cmd == 'collect':
        return pipeline.collect(args.mix, args.episodes, args.seed, args.out)
    if cmd == 'calibrate-anchors':
        return pipeline.calibrate_anchors(args.episodes)
    if cmd == 'train-wm':
        return pipeline.train_world_model(args.steps, args.resume)
    if cmd == 'train-ground':
        return pipeline.train_grounding(args.steps, args.resume)
    if cmd == 'train-agent':
        return pipeline.train_agent(args.prompt, args.mode, aligner, args.reward, args.video_task, args.steps, args.tag)
    if cmd == 'train-revconn':
        return pipeline.train_revconn(args.steps)
    if cmd == 'eval':
        return pipeline.evaluate(args.policy, args.task, args.episodes)
    if cmd == 'decode-prompt':
        return pipeline.decode_prompt(args.prompt, args.video_task, aligner, args.out)
    if cmd == 'ablate-data':
        return pipeline.ablate_data(args.subsets, args.tasks)
    if cmd == 'ablate-temporal':
        return pipeline.ablate_temporal(args.prompt, args.b_values, args.steps)
    if cmd == 'gap-stats':
        return pipeline.gap_stats()
    if cmd == 'report':
        return pipeline.report()
    raise ValueError(f"unknown command {cmd}")


def print_status(status: dict):
    print("📊 Run Status:")
    print(f"   Run directory: {status['run_dir']} (config {status['config_hash']})")
    print(f"   Dataset: {'✅' if status['dataset_exists'] else '❌'}")
    print(f"   Anchors: {'✅' if status['anchors_exist'] else '❌'}")
    for stage, exists in status['stages'].items():
        print(f"   {stage}: {'✅' if exists else '❌'}")
    print(f"   Policies: {', '.join(status['policies']) or 'none'}")
    if not status['dataset_exists']:
        print("\n💡 Tip: start with `python main.py collect`")


def print_summary(command: str, result: dict):
    if command == 'gap-stats':
        for row in result['rows']:
            print(f"   {row['prompt']:<16} {row['task']:<14} cos={row['cos']:.4f} aligned={row['aligned_cos']:.4f}")
        print(f"   mean cos = {result['mean_cos']:.4f}")
    elif command in ('ablate-data', 'ablate-temporal'):
        for row in result['rows']:
            print('   ' + ' '.join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    final = result.get('final')
    if final:
        print('   final: ' + ' '.join(f"{k}={v:.4g}" for k, v in final.items()))
    if 'path' in result:
        print(f"📁 {result['path']}")


def main():
    # Load environment variables (GNRL_SEED, GNRL_QUIET)
    load_dotenv()

    args = build_parser().parse_args()
    if args.quiet:
        set_quiet(True)

    try:
        cfg = load_config(args.config)
    except GenRLError as e:
        log_error(str(e))
        sys.exit(e.exit_code)

    pipeline = GenRLPipeline(cfg, run_dir=args.run_dir)

    if args.command == 'status':
        print_status(pipeline.get_status())
        return

    result = dispatch(pipeline, args)
    if result['success']:
        print(f"\n🎉 {args.command} finished")
        print_summary(args.command, result)
    else:
        print(f"\n❌ {args.command} failed: {result.get('error', 'Unknown error')}")
        sys.exit(result['exit_code'] or 1)


if __name__ == "__main__":
    main()
