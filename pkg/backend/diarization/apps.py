from django.apps import AppConfig


class DiarizationConfig(AppConfig):
    name = 'diarization'
    verbose_name = 'Multi-scale Speaker Diarization'
