"""
Pipeline coordinator behind the CLI.

Each public method runs one stage end to end (load prerequisites, train or
evaluate, write checkpoint / CSV) and returns a result dictionary with
``success``, ``error`` and ``exit_code`` keys. No exception escapes: package
errors keep their own exit code, I/O and unexpected failures exit with 1.
"""

import copy
import os
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .behavior import (GenRLReward, LatentAgent, RevConnTrainer, BehaviorTrainer, WMClipReward, evaluate_policy,
                       load_agent, load_revconn, temporal_alignment_ablation)
from .config import RunConfig
from .embedder import MockEmbedder, load_prompt_registry
from .envs import EXPERTS, TASKS, EpisodeRecord, ScoreAnchors, calibrate_anchors, collect_dataset, get_task, parse_mix, random_policy
from .errors import CalibrationMissingError, ConfigError, GenRLError, StageOrderError
from .grounding import GroundingTrainer, Grounding, denoising_report, gap_bridging_report, load_grounding
from .logger import log_error, log_info, log_processing, log_success, log_warning
from .metrics import MetricsWriter, mean_and_stderr, write_table
from .numerics import Rng
from .report import write_report
from .storage import (STAGES, checkpoint_path, io_stats, load_checkpoint, load_dataset, require_stages,
                      save_checkpoint, select_policies, write_dataset)
from .worldmodel import WorldModel, WorldModelTrainer, load_world_model, sample_sequences

EVAL_COLUMNS = ['task', 'mode', 'seed', 'raw', 'normalized']
SUMMARY_COLUMNS = ['task', 'mode', 'episodes', 'raw_mean', 'normalized_mean', 'normalized_stderr']
HELD_OUT_EPISODES = 20


def policy_tag(label: str, mode: str, aligner_off: bool = False, reward: str = 'genrl') -> str:
    tag = f"{label}_{mode}"
    if aligner_off:
        tag += "_noaligner"
    if reward != 'genrl':
        tag += f"_{reward}"
    return tag.replace(':', '-').replace('/', '-')


class GenRLPipeline:
    def __init__(self, cfg: RunConfig, run_dir: Optional[str] = None):
        self.cfg = cfg
        self.run_dir = run_dir or cfg.run.run_dir
        self.config_hash = cfg.config_hash()
        self._embedder: Optional[MockEmbedder] = None

    # plumbing

    def _guarded(self, action: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
        result = {'success': False, 'error': None, 'exit_code': 0}
        try:
            result.update(action())
            result['success'] = True
        except GenRLError as e:
            result['error'] = str(e)
            result['exit_code'] = e.exit_code
            log_error(str(e))
        except OSError as e:
            result['error'] = f"I/O error: {e}"
            result['exit_code'] = GenRLError.exit_code
            log_error(result['error'])
        except Exception as e:
            result['error'] = f"{type(e).__name__}: {e}"
            result['exit_code'] = GenRLError.exit_code
            log_error(f"Unexpected failure: {result['error']}")
        return result

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    @property
    def embedder(self) -> MockEmbedder:
        if self._embedder is None:
            registry = load_prompt_registry(self.cfg.run.registry or None)
            self._embedder = MockEmbedder(self.cfg.embedder, registry, self.cfg.env.episode_length)
        return self._embedder

    def _records(self) -> List[EpisodeRecord]:
        return load_dataset(self.cfg.run.dataset)

    def _check_hash(self, meta: Dict[str, Any], stage: str):
        if meta.get('config_hash') != self.config_hash:
            log_warning(f"Checkpoint '{stage}' was written with config {meta.get('config_hash')}, "
                        f"current config is {self.config_hash}")

    def _load_wm(self) -> WorldModel:
        ckpt = load_checkpoint(checkpoint_path(self.run_dir, 'wm'), 'wm')
        self._check_hash(ckpt.meta, 'wm')
        return load_world_model(ckpt, self.cfg)

    def _load_grounding(self) -> Grounding:
        ckpt = load_checkpoint(checkpoint_path(self.run_dir, 'grounding'), 'grounding')
        self._check_hash(ckpt.meta, 'grounding')
        return load_grounding(ckpt, self.cfg)

    def _held_out_episodes(self) -> List[EpisodeRecord]:
        env = self.cfg.env
        return collect_dataset(parse_mix(env.mix), HELD_OUT_EPISODES, self.cfg.run.seed + 1_000_003,
                               env.episode_length)

    def _prompt_input(self, prompt: Optional[str], video_task: Optional[str]):
        """(prompt input for the grounding networks, label, task id, is video)."""
        if video_task:
            get_task(video_task)
            return self.embedder.expert_windows(video_task, 1)[0], f"video:{video_task}", video_task, True
        if not prompt:
            raise ConfigError("Give a language prompt (--prompt) or a video task (--video-task)")
        return prompt, prompt, self.embedder.prompt_task(prompt), False

    def _prompt_for_task(self, task_id: str) -> Optional[str]:
        for prompt, task in self.embedder.registry.items():
            if task == task_id:
                return prompt
        return None

    # stages

    def collect(self, mix: Optional[str] = None, episodes: Optional[int] = None, seed: Optional[int] = None,
                out: Optional[str] = None) -> Dict[str, Any]:
        def action():
            policy_mix = parse_mix(mix or self.cfg.env.mix)
            n = self.cfg.env.episodes if episodes is None else episodes
            s = self.cfg.run.seed if seed is None else seed
            path = out or self.cfg.run.dataset
            records = collect_dataset(policy_mix, n, s, self.cfg.env.episode_length)
            fingerprint = write_dataset(path, records, seed=s, policy_mix=policy_mix)
            log_success(f"Dataset written to {path} ({len(records)} episodes, sha256 {fingerprint[:16]})")
            return {'path': path, 'episodes': len(records), 'fingerprint': fingerprint}
        return self._guarded(action)

    def calibrate_anchors(self, episodes: Optional[int] = None) -> Dict[str, Any]:
        def action():
            n = episodes or self.cfg.env.calibration_episodes
            anchors = calibrate_anchors(n, self.cfg.run.seed, self.cfg.env.episode_length)
            anchors.save(self.cfg.run.anchors)
            log_success(f"Anchors saved to {self.cfg.run.anchors}")
            return {'path': self.cfg.run.anchors, 'anchors': anchors.anchors}
        return self._guarded(action)

    def train_world_model(self, steps: Optional[int] = None, resume: bool = False) -> Dict[str, Any]:
        def action():
            records = self._records()
            total = self.cfg.worldmodel.steps if steps is None else steps
            path = checkpoint_path(self.run_dir, 'wm')
            if resume and os.path.exists(path):
                ckpt = load_checkpoint(path, 'wm')
                self._check_hash(ckpt.meta, 'wm')
                trainer = WorldModelTrainer.from_checkpoint(ckpt, self.cfg, records)
                log_info(f"Resuming world-model training at step {trainer.step}")
            else:
                trainer = WorldModelTrainer(self.cfg, records)
            log_processing(f"Training world model for {max(0, total - trainer.step)} steps")
            with MetricsWriter(self.path('wm_metrics.csv'), trainer.columns, self.config_hash,
                               append=resume) as writer:
                history = trainer.train(max(0, total - trainer.step), writer)
            save_checkpoint(path, trainer.to_checkpoint())
            recon = trainer.model.reconstruction_report(self._held_out_episodes())
            log_success(f"World model saved to {path}; held-out recon MSE {recon['mse']:.4f} "
                        f"({recon['ratio']:.1%} of observation variance)")
            return {'path': path, 'steps': trainer.step, 'final': history[-1] if history else {},
                    'reconstruction': recon}
        return self._guarded(action)

    def train_grounding(self, steps: Optional[int] = None, resume: bool = False) -> Dict[str, Any]:
        def action():
            require_stages(self.run_dir, 'grounding')
            records = self._records()
            wm = self._load_wm()
            embedder = self.embedder
            total = self.cfg.grounding.steps if steps is None else steps
            path = checkpoint_path(self.run_dir, 'grounding')
            if resume and os.path.exists(path):
                ckpt = load_checkpoint(path, 'grounding')
                trainer = GroundingTrainer.from_checkpoint(ckpt, self.cfg, records, wm, embedder)
                log_info(f"Resuming grounding training at step {trainer.step}")
            else:
                trainer = GroundingTrainer(self.cfg, records, wm, embedder)
            calls_before = embedder.language_calls
            log_processing(f"Training connector and aligner for {max(0, total - trainer.step)} steps")
            with MetricsWriter(self.path('grounding_metrics.csv'), trainer.columns, self.config_hash,
                               append=resume) as writer:
                history = trainer.train(max(0, total - trainer.step), writer)
            language_calls = embedder.language_calls - calls_before
            save_checkpoint(path, trainer.to_checkpoint())

            held_out = sample_sequences(self._held_out_episodes(), 256, self.cfg.embedder.window,
                                        Rng(self.cfg.run.seed, 90)).obs
            denoise = denoising_report(trainer.grounding.aligner, embedder.embed_vision_batch(held_out),
                                       self.cfg.grounding.aligner_sigma, Rng(self.cfg.run.seed, 91))
            bridging = gap_bridging_report(trainer.grounding.aligner, embedder)
            log_success(f"Grounding saved to {path}; denoising gain {denoise['improvement']:+.4f}, "
                        f"clean cos {denoise['clean_cos']:.4f}")
            return {'path': path, 'steps': trainer.step, 'final': history[-1] if history else {},
                    'language_calls': language_calls, 'denoising': denoise, 'gap_bridging': bridging}
        return self._guarded(action)

    def train_agent(self, prompt: Optional[str] = None, mode: Optional[str] = None,
                    use_aligner: Optional[bool] = None, reward: Optional[str] = None,
                    video_task: Optional[str] = None, steps: Optional[int] = None,
                    tag: Optional[str] = None) -> Dict[str, Any]:
        def action():
            b = self.cfg.behavior
            run_mode = mode or b.mode
            reward_kind = reward or b.reward
            if run_mode not in ('offline', 'datafree'):
                raise ConfigError(f"--mode must be offline or datafree, got '{run_mode}'")
            if reward_kind not in ('genrl', 'wmclip'):
                raise ConfigError(f"--reward must be genrl or wmclip, got '{reward_kind}'")
            prompt_input, label, task_id, is_video = self._prompt_input(prompt, video_task)
            aligner_on = use_aligner if use_aligner is not None else (False if is_video else b.use_aligner)

            require_stages(self.run_dir, 'policy')
            if reward_kind == 'wmclip' and not os.path.exists(checkpoint_path(self.run_dir, 'revconn')):
                raise StageOrderError('revconn', checkpoint_path(self.run_dir, 'revconn'))
            reads_before = io_stats['dataset_reads']
            wm = self._load_wm()
            grounding = self._load_grounding()
            records = self._records() if run_mode == 'offline' else None

            if reward_kind == 'genrl':
                target = grounding.targets(prompt_input, self.embedder, aligner_on)
                reward_fn = GenRLReward(wm, target, b.align_window, b.distance)
            else:
                revconn = load_revconn(load_checkpoint(checkpoint_path(self.run_dir, 'revconn'), 'revconn'),
                                       self.cfg, wm)
                reward_fn = WMClipReward(revconn, grounding.embed_prompt(prompt_input, self.embedder, aligner_on))

            trainer = BehaviorTrainer(self.cfg, wm, reward_fn, grounding, records, run_mode)
            name = tag or policy_tag(label, run_mode, not aligner_on and not is_video, reward_kind)
            n_steps = b.steps if steps is None else steps
            log_processing(f"Training '{label}' policy ({run_mode}, {reward_kind}) for {n_steps} steps")
            with MetricsWriter(self.path(f"policy_{name}_metrics.csv"), trainer.columns, self.config_hash) as writer:
                history = trainer.train(n_steps, writer)
            path = checkpoint_path(self.run_dir, 'policy', name)
            save_checkpoint(path, trainer.to_checkpoint(prompt=label, task=task_id, reward=reward_kind,
                                                        use_aligner=aligner_on))
            log_success(f"Policy saved to {path}")
            return {'path': path, 'tag': name, 'task': task_id, 'mode': run_mode,
                    'final': history[-1] if history else {},
                    'dataset_reads': io_stats['dataset_reads'] - reads_before}
        return self._guarded(action)

    def train_revconn(self, steps: Optional[int] = None) -> Dict[str, Any]:
        def action():
            require_stages(self.run_dir, 'revconn')
            records = self._records()
            wm = self._load_wm()
            trainer = RevConnTrainer(self.cfg, records, wm, self.embedder)
            n_steps = self.cfg.behavior.revconn_steps if steps is None else steps
            log_processing(f"Training reversed connector for {n_steps} steps")
            with MetricsWriter(self.path('revconn_metrics.csv'), trainer.columns, self.config_hash) as writer:
                history = trainer.train(n_steps, writer)
            path = checkpoint_path(self.run_dir, 'revconn')
            save_checkpoint(path, trainer.to_checkpoint())
            log_success(f"Reversed connector saved to {path}")
            return {'path': path, 'steps': trainer.step, 'final': history[-1] if history else {}}
        return self._guarded(action)

    # evaluation

    def evaluate(self, policy: str, task: Optional[str] = None, episodes: Optional[int] = None,
                 name: Optional[str] = None) -> Dict[str, Any]:
        """`policy` is a checkpoint path, a policy tag in the run directory, or expert / random."""
        def action():
            anchors = ScoreAnchors.load(self.cfg.run.anchors)
            n = self.cfg.behavior.eval_episodes if episodes is None else episodes
            if policy in ('expert', 'random'):
                if not task:
                    raise ConfigError("--task is required for the expert and random plug-ins")
                spec = get_task(task)
                controller = EXPERTS[spec.expert] if policy == 'expert' else random_policy(Rng(self.cfg.run.seed, 77))
                mode_label, task_id, label = policy, task, policy
            else:
                path = policy if os.path.exists(policy) else checkpoint_path(self.run_dir, 'policy', policy)
                ckpt = load_checkpoint(path, 'policy')
                self._check_hash(ckpt.meta, 'policy')
                wm = self._load_wm()
                controller = LatentAgent(wm, load_agent(ckpt, self.cfg, wm).actor)
                mode_label = ckpt.meta.get('mode', '')
                task_id = task or ckpt.meta.get('task')
                label = os.path.splitext(os.path.basename(path))[0]
                if label.startswith('policy_'):
                    label = label[len('policy_'):]
                if not task_id:
                    raise ConfigError("--task is required for this policy checkpoint")
            if task_id not in anchors.anchors:
                raise CalibrationMissingError(task_id)

            log_processing(f"Evaluating {label} on {task_id} for {n} episodes")
            result = evaluate_policy(controller, task_id, n, self.cfg.run.seed, anchors, mode_label,
                                     self.cfg.env.episode_length)
            out_name = name or f"{label}_{task_id}"
            write_table(self.path(f"eval_{out_name}.csv"), EVAL_COLUMNS, result['rows'], self.config_hash)
            summary = {'task': task_id, 'mode': mode_label, 'episodes': n, 'raw_mean': result['raw_mean'],
                       'normalized_mean': result['mean'], 'normalized_stderr': result['stderr']}
            write_table(self.path(f"eval_{out_name}_summary.csv"), SUMMARY_COLUMNS, [summary], self.config_hash)
            log_success(f"{task_id}: normalized {result['mean']:.3f} ± {result['stderr']:.3f}")
            return {'summary': summary, 'rows': result['rows']}
        return self._guarded(action)

    def decode_prompt(self, prompt: Optional[str] = None, video_task: Optional[str] = None,
                      use_aligner: Optional[bool] = None, out: Optional[str] = None) -> Dict[str, Any]:
        def action():
            prompt_input, label, task_id, is_video = self._prompt_input(prompt, video_task)
            require_stages(self.run_dir, 'grounding')
            wm = self._load_wm()
            grounding = self._load_grounding()
            target = grounding.targets(prompt_input, self.embedder, use_aligner)
            with nx.no_tape():
                decoded = wm.decode(target.states).data
            rows = [{'step': i, 'px': float(o[0]), 'py': float(o[1]), 'vx': float(o[2]), 'vy': float(o[3])}
                    for i, o in enumerate(decoded)]
            path = out or self.path(f"decoded_{label.replace(':', '-')}.csv")
            write_table(path, ['step', 'px', 'py', 'vx', 'vy'], rows, self.config_hash)
            result = {'path': path, 'task': task_id, 'decoded': decoded}
            if is_video:
                result['rms'] = float(np.sqrt(np.mean((decoded - prompt_input) ** 2)))
                log_info(f"Decoded targets are {result['rms']:.4f} RMS from the prompt window")
            log_success(f"Decoded {len(rows)} target states to {path}")
            return result
        return self._guarded(action)

    # experiments

    def ablate_data(self, subsets: Sequence[str], tasks: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """
        Subsets are '+'-joined policy ids ('all' = whole dataset). Each gets its
        own world model and grounding, then one data-free agent per task.
        """
        def action():
            anchors = ScoreAnchors.load(self.cfg.run.anchors)
            records = self._records()
            task_ids = list(tasks or TASKS)
            b = self.cfg.behavior
            rows = []
            for spec in subsets:
                ids = sorted({r.policy_id for r in records}) if spec == 'all' else spec.split('+')
                subset = select_policies(records, ids)
                if not subset:
                    log_warning(f"Subset '{spec}' selects no episodes; skipping")
                    continue
                log_processing(f"Data subset '{spec}': {len(subset)} episodes")
                cfg = copy.deepcopy(self.cfg)
                wm_trainer = WorldModelTrainer(cfg, subset)
                wm_trainer.train(cfg.worldmodel.steps)
                wm = wm_trainer.model
                g_trainer = GroundingTrainer(cfg, subset, wm, self.embedder)
                g_trainer.train(cfg.grounding.steps)
                grounding = g_trainer.grounding

                row: Dict[str, Any] = {'subset': spec}
                for task_id in task_ids:
                    prompt = self._prompt_for_task(task_id)
                    if prompt is None:
                        log_warning(f"No registered prompt for task '{task_id}'; skipping")
                        row[task_id] = float('nan')
                        continue
                    target = grounding.targets(prompt, self.embedder)
                    trainer = BehaviorTrainer(cfg, wm, GenRLReward(wm, target, b.align_window, b.distance),
                                              grounding, mode='datafree')
                    trainer.train(b.steps)
                    result = evaluate_policy(LatentAgent(wm, trainer.agent.actor), task_id, b.eval_episodes,
                                             cfg.run.seed, anchors, 'datafree', cfg.env.episode_length)
                    row[task_id] = result['mean']
                scores = [row[t] for t in task_ids if not np.isnan(row[t])]
                row['mean'] = mean_and_stderr(scores)[0]
                rows.append(row)
            write_table(self.path('ablate_data.csv'), ['subset'] + task_ids + ['mean'], rows, self.config_hash)
            log_success(f"Data ablation matrix: {len(rows)} subsets x {len(task_ids)} tasks")
            return {'rows': rows, 'path': self.path('ablate_data.csv')}
        return self._guarded(action)

    def ablate_temporal(self, prompt: str, b_values: Optional[Sequence[int]] = None,
                        steps: Optional[int] = None) -> Dict[str, Any]:
        def action():
            b = self.cfg.behavior
            task_id = self.embedder.prompt_task(prompt)
            values = sorted(set(b_values or [1, b.align_window, b.horizon]))
            for v in values:
                if not 1 <= v <= b.horizon:
                    raise ConfigError(f"alignment window {v} outside [1, {b.horizon}]")
            require_stages(self.run_dir, 'policy')
            wm = self._load_wm()
            target = self._load_grounding().targets(prompt, self.embedder)
            try:
                anchors = ScoreAnchors.load(self.cfg.run.anchors)
            except CalibrationMissingError:
                log_warning("No anchors; reporting imagined reward only")
                anchors = None
            rows = temporal_alignment_ablation(self.cfg, wm, target, values, b.steps if steps is None else steps,
                                               anchors, task_id, b.eval_episodes)
            write_table(self.path('ablate_temporal.csv'), ['b', 'reward_mean', 'normalized', 'stderr'], rows,
                        self.config_hash)
            return {'rows': rows, 'path': self.path('ablate_temporal.csv')}
        return self._guarded(action)

    def gap_stats(self) -> Dict[str, Any]:
        def action():
            embedder = self.embedder
            embedder.register_all()
            rows = embedder.gap_stats()
            aligned = {}
            if os.path.exists(checkpoint_path(self.run_dir, 'grounding')):
                for r in gap_bridging_report(self._load_grounding().aligner, embedder):
                    aligned[r['prompt']] = r['aligned_cos']
            for row in rows:
                row['aligned_cos'] = aligned.get(row['prompt'], float('nan'))
            write_table(self.path('gap_stats.csv'), ['prompt', 'task', 'cos', 'aligned_cos'], rows, self.config_hash)
            return {'rows': rows, 'mean_cos': mean_and_stderr([r['cos'] for r in rows])[0]}
        return self._guarded(action)

    def get_status(self) -> Dict[str, Any]:
        policies = []
        if os.path.isdir(self.run_dir):
            policies = sorted(f[len('policy_'):-len('.npz')] for f in os.listdir(self.run_dir)
                              if f.startswith('policy_') and f.endswith('.npz'))
        return {
            'run_dir': self.run_dir,
            'config_hash': self.config_hash,
            'dataset_exists': os.path.exists(self.cfg.run.dataset),
            'anchors_exist': os.path.exists(self.cfg.run.anchors),
            'stages': {s: os.path.exists(checkpoint_path(self.run_dir, s)) for s in STAGES if s != 'policy'},
            'policies': policies,
        }

    def report(self) -> Dict[str, Any]:
        def action():
            path = write_report(self.run_dir, self.config_hash)
            log_success(f"Report written to {path}")
            return {'path': path}
        return self._guarded(action)
