from dataclasses import replace

from django.core.management.base import CommandError

from diarization.management.base import PipelineCommand
from diarization.neuralkit import load_checkpoint
from diarization.pipeline import load_training_sessions, write_jsonl
from diarization.scorer import SETUPS
from diarization.tuning import DEFAULT_R_GRID, DEFAULT_THRESHOLD_GRID, tune_r, tune_threshold


class Command(PipelineCommand):
    help = 'Grid-search the clustering weight r and the MSDD threshold against development RTTMs'

    def add_command_arguments(self, parser):
        parser.add_argument('dev_dir', help='Archives and reference RTTMs of the development set')
        parser.add_argument('--out', required=True, help='Line-delimited JSON tuning report')
        parser.add_argument('--setup', choices=sorted(SETUPS), default='forgiving')
        parser.add_argument('--r-grid', type=float, nargs='+', default=list(DEFAULT_R_GRID))
        parser.add_argument('--checkpoint', help='Checkpoint stem; enables the threshold search')
        parser.add_argument('--threshold-grid', type=float, nargs='+', default=list(DEFAULT_THRESHOLD_GRID))
        parser.add_argument('--preset', help='Scale preset (telephonic or meeting)')

    def config_overrides(self, options):
        return {'scales': {'preset': options['preset']}}

    def run(self, options):
        config = self.load_config(options)
        setup = SETUPS[options['setup']]
        sessions = load_training_sessions(options['dev_dir'], config.scales, config.jobs)
        if not sessions:
            raise CommandError(f"no development sessions in {options['dev_dir']}")

        self.info(f"Tuning r over {len(options['r_grid'])} values on {len(sessions)} sessions...")
        r_result = tune_r(sessions, config.clustering, setup, options['r_grid'], config.jobs)
        best_r = r_result.best.value
        points = list(r_result.points)
        best = {'r': best_r, 'threshold': None}

        if options['checkpoint']:
            params, _ = load_checkpoint(options['checkpoint'])
            params.check_compatible(config.scales.num_scales, sessions[0].embeddings.dim)
            clustering = replace(config.clustering, r=best_r)
            self.info(f"Tuning T over {len(options['threshold_grid'])} values at r={best_r:g}...")
            t_result = tune_threshold(sessions, params, clustering, setup, options['threshold_grid'], config.jobs)
            points.extend(t_result.points)
            best['threshold'] = t_result.best.value
            best_der = t_result.best.der
        else:
            best_der = r_result.best.der

        records = [{'setup': options['setup'], **point.as_dict()} for point in points]
        records.append({'setup': options['setup'], 'best': True, 'der': best_der, **best})
        write_jsonl(options['out'], records)
        summary = f"r={best_r:g}" + (f", T={best['threshold']:g}" if best['threshold'] is not None else '')
        self.success(f"Best {summary}: DER ({options['setup']}) {best_der:.4f}")
