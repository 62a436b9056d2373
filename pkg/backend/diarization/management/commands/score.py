from django.core.management.base import CommandError

from diarization.management.base import PipelineCommand
from diarization.pipeline import load_reference_dir, write_jsonl
from diarization.scorer import SETUPS, aggregate, score_corpus


class Command(PipelineCommand):
    help = 'Score hypothesis RTTMs against references (DER, forgiving or full setup)'
    uses_config = False

    def add_command_arguments(self, parser):
        parser.add_argument('--ref-dir', required=True)
        parser.add_argument('--hyp-dir', required=True)
        parser.add_argument('--setup', choices=sorted(SETUPS), default='forgiving')
        parser.add_argument('--out', required=True, help='Line-delimited JSON score report')

    def run(self, options):
        setup = SETUPS[options['setup']]
        references = load_reference_dir(options['ref_dir'])
        hypotheses = load_reference_dir(options['hyp_dir'])
        if not references:
            raise CommandError(f"no reference RTTMs in {options['ref_dir']}")

        results = score_corpus(references, hypotheses, setup)
        total = aggregate(results)
        records = [
            {'session_id': session_id, 'setup': options['setup'], **breakdown.as_dict()}
            for session_id, breakdown in results.items()
        ]
        records.append({'session_id': None, 'aggregate': True, 'setup': options['setup'], **total.as_dict()})
        write_jsonl(options['out'], records)
        self.success(f"DER ({options['setup']}) over {len(results)} sessions: {total.der:.4f}")
