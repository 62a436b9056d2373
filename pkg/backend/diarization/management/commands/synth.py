import json
from pathlib import Path

from django.core.management.base import CommandError

from diarization.management.base import PipelineCommand
from diarization.pipeline import CORPUS_MANIFEST, corpus_plan, run_parallel, synthesize_session, write_jsonl


class Command(PipelineCommand):
    help = 'Generate a synthetic corpus: embedding archives, reference RTTMs and corpus.jsonl'

    def add_command_arguments(self, parser):
        parser.add_argument('out_dir', help='Directory receiving the corpus')
        parser.add_argument('--num-sessions', type=int)
        parser.add_argument(
            '--num-speakers', type=json.loads,
            help='Speakers per session: a count such as 2, or an inclusive range such as [2,4]',
        )
        parser.add_argument('--duration', type=float, help='Session length in seconds')
        parser.add_argument('--overlap-fraction', type=float)
        parser.add_argument('--seed', type=int, help='Corpus seed')
        parser.add_argument('--preset', help='Scale preset (telephonic or meeting)')

    def config_overrides(self, options):
        return {
            'synth': {
                'num_sessions': options['num_sessions'],
                'num_speakers': options['num_speakers'],
                'session_duration': options['duration'],
                'overlap_fraction': options['overlap_fraction'],
                'seed': options['seed'],
            },
            'scales': {'preset': options['preset']},
        }

    def run(self, options):
        config = self.load_config(options)
        out_dir = Path(options['out_dir'])
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CommandError(f"cannot create output directory {out_dir}: {exc.strerror or exc}") from exc

        plan = corpus_plan(config.synth)
        self.info(f'Generating {len(plan)} sessions into {out_dir}...')
        records = run_parallel(
            lambda item: synthesize_session(out_dir, config.synth, config.scales, *item),
            plan, config.jobs,
        )
        for record in records:
            record['corpus_seed'] = config.synth.seed
        write_jsonl(out_dir / CORPUS_MANIFEST, records)
        self.success(f'Successfully generated {len(records)} sessions')
