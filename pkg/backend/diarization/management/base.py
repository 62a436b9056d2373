from django.core.management.base import BaseCommand, CommandError

from diarization.config import load_config
from diarization.exceptions import DiarizationError


class PipelineCommand(BaseCommand):
    """
    Base for the pipeline commands: a --config file plus per-command override
    flags, and domain errors reported as CommandError (nonzero exit).
    Progress goes to stderr; results only to files.
    """
    uses_config = True

    def add_arguments(self, parser):
        if self.uses_config:
            parser.add_argument('--config', help='JSON pipeline config file')
            parser.add_argument('--jobs', type=int, help='Sessions processed in parallel')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_overrides(self, options):
        return {}

    def load_config(self, options):
        overrides = self.config_overrides(options)
        overrides['jobs'] = options.get('jobs')
        return load_config(options.get('config'), overrides)

    def handle(self, *args, **options):
        try:
            self.run(options)
        except DiarizationError as exc:
            raise CommandError(str(exc)) from exc
        except OSError as exc:
            raise CommandError(f"{exc.filename or 'I/O error'}: {exc.strerror or exc}") from exc

    def run(self, options):
        raise NotImplementedError

    def success(self, message):
        self.stderr.write(self.style.SUCCESS(message))

    def info(self, message):
        self.stderr.write(message)
