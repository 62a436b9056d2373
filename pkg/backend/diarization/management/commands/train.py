from dataclasses import asdict
from pathlib import Path

from django.core.management.base import CommandError

from diarization.management.base import PipelineCommand
from diarization.msdd import train
from diarization.neuralkit import checkpoint_paths, save_checkpoint
from diarization.pipeline import load_training_sessions, write_jsonl


class Command(PipelineCommand):
    help = 'Train the MSDD decoder on two-speaker sessions with validation-F1 early stopping'

    def add_command_arguments(self, parser):
        parser.add_argument('--train-dir', required=True, help='Archives and reference RTTMs for training')
        parser.add_argument('--val-dir', required=True, help='Archives and reference RTTMs for validation')
        parser.add_argument('--out', required=True, help='Checkpoint stem')
        parser.add_argument('--max-epochs', type=int)
        parser.add_argument('--patience', type=int)
        parser.add_argument('--learning-rate', type=float)
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--profile-mode', choices=['oracle', 'clustering'])
        parser.add_argument('--seed', type=int)
        parser.add_argument('--preset', help='Scale preset (telephonic or meeting)')

    def config_overrides(self, options):
        return {
            'training': {
                'max_epochs': options['max_epochs'],
                'patience': options['patience'],
                'learning_rate': options['learning_rate'],
                'batch_size': options['batch_size'],
                'profile_mode': options['profile_mode'],
                'seed': options['seed'],
            },
            'scales': {'preset': options['preset']},
        }

    def run(self, options):
        config = self.load_config(options)
        train_sessions = load_training_sessions(options['train_dir'], config.scales, config.jobs)
        val_sessions = load_training_sessions(options['val_dir'], config.scales, config.jobs)
        if not train_sessions:
            raise CommandError(f"no training sessions in {options['train_dir']}")

        shape = config.msdd.model_shape(config.scales.num_scales, train_sessions[0].embeddings.dim)
        self.info(f'Training on {len(train_sessions)} sessions, validating on {len(val_sessions)}...')
        params, report = train(train_sessions, val_sessions, shape, config.training)

        stem = Path(options['out'])
        save_checkpoint(stem, params, hyper=asdict(config.training), seed=config.training.seed)
        write_jsonl(stem.with_name(stem.name + '.metrics.jsonl'), report.as_dicts())
        manifest_path, _ = checkpoint_paths(stem)
        self.success(
            f'Successfully trained: best validation F1 {report.best_f1:.4f} '
            f'at epoch {report.best_epoch}; checkpoint {manifest_path}'
        )
