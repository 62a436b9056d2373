from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from .core import ScaleConfig
from .exceptions import ScaleMismatchError
from .synthembed import MAX_SPEAKERS


def _preset_choices():
    return [(name, name) for name in settings.SCALE_PRESETS]


class ScaleConfigForm(forms.Form):
    """Scale layout: a named preset or explicit window (and optional hop) lists"""
    preset = forms.ChoiceField(choices=_preset_choices, required=False)
    windows = forms.JSONField(required=False)
    hops = forms.JSONField(required=False)

    def clean(self):
        cleaned_data = super().clean()
        windows = cleaned_data.get('windows')
        hops = cleaned_data.get('hops')
        preset = cleaned_data.get('preset')
        if windows is None:
            if not preset:
                raise ValidationError("Either a scale preset or a list of windows is required.")
            windows = settings.SCALE_PRESETS[preset]
        for name, values in (('windows', windows), ('hops', hops)):
            if values is not None and (
                not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values)
            ):
                raise ValidationError(f"{name} must be a list of numbers.")
        try:
            cleaned_data['scale_config'] = ScaleConfig.from_windows(windows, hops)
        except ScaleMismatchError as exc:
            raise ValidationError(str(exc))
        return cleaned_data


class ClusteringConfigForm(forms.Form):
    r = forms.FloatField()
    max_speakers = forms.IntegerField(min_value=1, max_value=MAX_SPEAKERS)
    max_p = forms.IntegerField(min_value=1)
    kmeans_init = forms.IntegerField(min_value=1)
    merge_residual = forms.FloatField(min_value=0.0, max_value=1.0)
    seed = forms.IntegerField(min_value=0)

    def clean_r(self):
        r = self.cleaned_data.get('r')
        if r is not None and r <= 0:
            raise ValidationError("r must be positive.")
        return r


class MsddConfigForm(forms.Form):
    threshold = forms.FloatField()
    conv_channels = forms.IntegerField(min_value=1)
    fc_hidden = forms.IntegerField(min_value=1)
    lstm_hidden = forms.IntegerField(min_value=1)
    lstm_layers = forms.IntegerField(min_value=1)

    def clean_threshold(self):
        threshold = self.cleaned_data.get('threshold')
        if threshold is not None and not 0 < threshold < 1:
            raise ValidationError("threshold must be strictly between 0 and 1.")
        return threshold


class TrainingConfigForm(forms.Form):
    learning_rate = forms.FloatField()
    max_epochs = forms.IntegerField(min_value=1)
    patience = forms.IntegerField(min_value=1)
    batch_size = forms.IntegerField(min_value=1)
    chunk_steps = forms.IntegerField(min_value=1)
    profile_mode = forms.ChoiceField(choices=[('oracle', 'oracle'), ('clustering', 'clustering')])
    seed = forms.IntegerField(min_value=0)

    def clean_learning_rate(self):
        learning_rate = self.cleaned_data.get('learning_rate')
        if learning_rate is not None and learning_rate <= 0:
            raise ValidationError("learning_rate must be positive.")
        return learning_rate


class SynthConfigForm(forms.Form):
    """Synthetic corpus settings; num_speakers is a count or an inclusive [low, high] range"""
    num_sessions = forms.IntegerField(min_value=1)
    num_speakers = forms.JSONField()
    dim = forms.IntegerField(min_value=1)
    session_duration = forms.FloatField()
    overlap_fraction = forms.FloatField(min_value=0.0)
    base_noise_sigma = forms.FloatField(min_value=0.0)
    scale_noise_exponent = forms.FloatField()
    min_centroid_angle = forms.FloatField(min_value=0.0)
    seed = forms.IntegerField(min_value=0)

    def clean_num_speakers(self):
        value = self.cleaned_data.get('num_speakers')
        if isinstance(value, bool):
            raise ValidationError("num_speakers must be an integer or a [low, high] pair.")
        if isinstance(value, int):
            low = high = value
        elif isinstance(value, list) and len(value) == 2 and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            low, high = value
        else:
            raise ValidationError("num_speakers must be an integer or a [low, high] pair.")
        if not 1 <= low <= high <= MAX_SPEAKERS:
            raise ValidationError(f"num_speakers must be between 1 and {MAX_SPEAKERS}.")
        return (low, high)

    def clean_session_duration(self):
        duration = self.cleaned_data.get('session_duration')
        if duration is not None and duration <= 0:
            raise ValidationError("session_duration must be positive.")
        return duration

    def clean_overlap_fraction(self):
        fraction = self.cleaned_data.get('overlap_fraction')
        if fraction is not None and fraction >= 0.5:
            raise ValidationError("overlap_fraction must be below 0.5.")
        return fraction

    def clean_min_centroid_angle(self):
        angle = self.cleaned_data.get('min_centroid_angle')
        if angle is not None and angle >= 180:
            raise ValidationError("min_centroid_angle must be below 180 degrees.")
        return angle
