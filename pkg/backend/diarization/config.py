"""
Layered pipeline configuration.

Precedence, lowest first: settings.DIARIZATION, the JSON config file,
MSDIAR_<SECTION>__<KEY> environment variables, command-line overrides.
"""
import copy
import json
import logging
import os
from dataclasses import dataclass, asdict
from pathlib import Path

from django.conf import settings

from .core import ScaleConfig
from .exceptions import ConfigError
from .forms import (
    ClusteringConfigForm,
    MsddConfigForm,
    ScaleConfigForm,
    SynthConfigForm,
    TrainingConfigForm,
)
from .msdd import TrainingHyper
from .neuralkit import MsddShape
from .synthembed import SynthConfig

logger = logging.getLogger(__name__)

SECTION_FORMS = {
    'scales': ScaleConfigForm,
    'clustering': ClusteringConfigForm,
    'msdd': MsddConfigForm,
    'training': TrainingConfigForm,
    'synth': SynthConfigForm,
}


@dataclass(frozen=True)
class ClusteringConfig:
    r: float
    max_speakers: int
    max_p: int
    kmeans_init: int
    merge_residual: float
    seed: int

    def as_kwargs(self):
        return asdict(self)


@dataclass(frozen=True)
class MsddConfig:
    threshold: float
    conv_channels: int
    fc_hidden: int
    lstm_hidden: int
    lstm_layers: int

    def model_shape(self, num_scales, emb_dim):
        return MsddShape(
            num_scales=num_scales, emb_dim=emb_dim, conv_channels=self.conv_channels,
            fc_hidden=self.fc_hidden, lstm_hidden=self.lstm_hidden, lstm_layers=self.lstm_layers,
        )


@dataclass(frozen=True)
class SynthCorpusConfig:
    num_sessions: int
    num_speakers: tuple
    dim: int
    session_duration: float
    overlap_fraction: float
    base_noise_sigma: float
    scale_noise_exponent: float
    min_centroid_angle: float
    seed: int

    def session_config(self, num_speakers, seed):
        return SynthConfig(
            num_speakers=num_speakers, dim=self.dim, session_duration=self.session_duration,
            overlap_fraction=self.overlap_fraction, base_noise_sigma=self.base_noise_sigma,
            scale_noise_exponent=self.scale_noise_exponent, min_centroid_angle=self.min_centroid_angle,
            seed=seed,
        )


@dataclass(frozen=True)
class PipelineConfig:
    scales: ScaleConfig
    clustering: ClusteringConfig
    msdd: MsddConfig
    training: TrainingHyper
    synth: SynthCorpusConfig
    jobs: int = 1

    def as_dict(self):
        data = asdict(self)
        data['scales'] = {'windows': list(self.scales.windows), 'hops': list(self.scales.hops)}
        data['synth']['num_speakers'] = list(self.synth.num_speakers)
        return data


def _merge(base, overrides, origin):
    for section, values in overrides.items():
        if section == 'jobs':
            base['jobs'] = values
            continue
        if section not in SECTION_FORMS:
            raise ConfigError(f"{origin}: unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        if section == 'scales' and 'preset' in values and 'windows' not in values:
            # a later preset replaces windows set by an earlier layer
            base['scales']['windows'] = base['scales']['hops'] = None
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            base[section][key] = value
    return base


def read_config_file(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def environment_overrides(environ=None):
    """MSDIAR_MSDD__THRESHOLD=0.6 -> {'msdd': {'threshold': 0.6}}; values parsed as JSON when possible"""
    environ = os.environ if environ is None else environ
    prefix = settings.DIARIZATION_ENV_PREFIX
    overrides = {}
    for name, raw in environ.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):].lower()
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key == 'jobs':
            overrides['jobs'] = value
        elif '__' in key:
            section, field = key.split('__', 1)
            overrides.setdefault(section, {})[field] = value
    return overrides


def _validate(merged):
    cleaned = {}
    problems = []
    for section, form_class in SECTION_FORMS.items():
        form = form_class(data=merged[section])
        if form.is_valid():
            cleaned[section] = form.cleaned_data
            continue
        for field, errors in form.errors.items():
            label = section if field == '__all__' else f"{section}.{field}"
            problems += [f"{label}: {error}" for error in errors]
    jobs = merged.get('jobs')
    if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 1:
        problems.append(f"jobs: must be a positive integer, got {jobs!r}")
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    return cleaned, jobs


def load_config(path=None, overrides=None, environ=None):
    """Build the validated PipelineConfig for one command run"""
    merged = copy.deepcopy(settings.DIARIZATION)
    if path:
        _merge(merged, read_config_file(path), str(path))
    _merge(merged, environment_overrides(environ), 'environment')
    if overrides:
        flags = {}
        for section, values in overrides.items():
            if section == 'jobs':
                if values is not None:
                    flags['jobs'] = values
                continue
            kept = {key: value for key, value in values.items() if value is not None}
            if kept:
                flags[section] = kept
        _merge(merged, flags, 'command line')

    cleaned, jobs = _validate(merged)
    clustering = ClusteringConfig(**cleaned['clustering'])
    training = dict(cleaned['training'])
    config = PipelineConfig(
        scales=cleaned['scales']['scale_config'],
        clustering=clustering,
        msdd=MsddConfig(**cleaned['msdd']),
        training=TrainingHyper(
            r=clustering.r, max_p=clustering.max_p, kmeans_init=clustering.kmeans_init, **training
        ),
        synth=SynthCorpusConfig(**cleaned['synth']),
        jobs=jobs,
    )
    logger.debug("configuration: %s", config.as_dict())
    return config
