from pathlib import Path

from django.core.management.base import CommandError

from diarization.management.base import PipelineCommand
from diarization.neuralkit import load_checkpoint
from diarization.pipeline import RUN_REPORT, diarize_session, load_sessions, run_parallel, write_hypothesis, write_jsonl


class Command(PipelineCommand):
    help = 'Diarize every archive in a directory, by clustering alone or with the MSDD decoder'

    def add_command_arguments(self, parser):
        parser.add_argument('in_dir', help='Directory of embedding archives')
        parser.add_argument('out_dir', help='Directory receiving hypothesis RTTMs and report.jsonl')
        parser.add_argument('--mode', choices=['clustering', 'msdd'], default='clustering')
        parser.add_argument('--checkpoint', help='Checkpoint stem (required in msdd mode)')
        parser.add_argument('--threshold', type=float)
        parser.add_argument('--r', type=float, help='Coarsest-scale clustering weight')
        parser.add_argument('--max-speakers', type=int)
        parser.add_argument('--preset', help='Scale preset (telephonic or meeting)')

    def config_overrides(self, options):
        return {
            'msdd': {'threshold': options['threshold']},
            'clustering': {'r': options['r'], 'max_speakers': options['max_speakers']},
            'scales': {'preset': options['preset']},
        }

    def run(self, options):
        mode = options['mode']
        if mode == 'msdd' and not options['checkpoint']:
            raise CommandError('msdd mode requires --checkpoint')
        config = self.load_config(options)

        params = None
        if mode == 'msdd':
            params, _ = load_checkpoint(options['checkpoint'])
        sessions = load_sessions(options['in_dir'], config.scales, config.jobs)
        if params is not None:
            for session in sessions:
                params.check_compatible(config.scales.num_scales, session.dim)

        out_dir = Path(options['out_dir'])
        out_dir.mkdir(parents=True, exist_ok=True)
        self.info(f'Diarizing {len(sessions)} sessions ({mode})...')
        outcomes = run_parallel(lambda session: diarize_session(session, config, mode, params), sessions, config.jobs)
        for outcome in outcomes:
            write_hypothesis(out_dir, outcome)
        write_jsonl(out_dir / RUN_REPORT, [outcome.record for outcome in outcomes])
        self.success(f'Successfully diarized {len(outcomes)} sessions')
