import json
from io import StringIO

import pytest
from django.core.management import call_command
from django.core.management.base import CommandError


def run(name, *args):
    stderr = StringIO()
    call_command(name, *[str(arg) for arg in args], stdout=StringIO(), stderr=stderr)
    return stderr.getvalue()


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture
def corpus(tmp_path, small_config_file):
    out_dir = tmp_path / 'corpus'
    run('synth', out_dir, '--config', small_config_file)
    return out_dir


@pytest.fixture
def checkpoint(tmp_path, corpus, small_config_file):
    stem = tmp_path / 'models' / 'msdd'
    run('train', '--train-dir', corpus, '--val-dir', corpus, '--out', stem, '--config', small_config_file)
    return stem


class TestSynth:
    def test_writes_corpus(self, tmp_path, small_config_file):
        output = run('synth', tmp_path / 'c', '--config', small_config_file)
        assert 'Successfully generated 3 sessions' in output
        records = read_jsonl(tmp_path / 'c' / 'corpus.jsonl')
        assert [record['session_id'] for record in records] == ['session-000', 'session-001', 'session-002']
        assert all(record['corpus_seed'] == 5 for record in records)
        for record in records:
            for suffix in ('.manifest', '.emb', '.rttm'):
                assert (tmp_path / 'c' / f"{record['session_id']}{suffix}").exists()

    def test_reruns_are_byte_identical(self, tmp_path, small_config_file):
        run('synth', tmp_path / 'first', '--config', small_config_file)
        run('synth', tmp_path / 'second', '--config', small_config_file)
        first = sorted(path.name for path in (tmp_path / 'first').iterdir())
        assert first == sorted(path.name for path in (tmp_path / 'second').iterdir())
        for name in first:
            assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()

    def test_flags_override_config(self, tmp_path, small_config_file):
        run('synth', tmp_path / 'c', '--config', small_config_file, '--num-sessions', 2, '--num-speakers', '[3,3]')
        records = read_jsonl(tmp_path / 'c' / 'corpus.jsonl')
        assert len(records) == 2
        assert all(record['num_speakers'] == 3 for record in records)

    def test_rejects_too_many_speakers(self, tmp_path, small_config_file):
        with pytest.raises(CommandError, match='num_speakers'):
            run('synth', tmp_path / 'c', '--config', small_config_file, '--num-speakers', 9)

    def test_unwritable_output(self, tmp_path, small_config_file):
        blocker = tmp_path / 'blocker'
        blocker.write_text('')
        with pytest.raises(CommandError, match='cannot create output directory'):
            run('synth', blocker / 'corpus', '--config', small_config_file)


class TestDiarize:
    def test_clustering_mode(self, tmp_path, corpus, small_config_file):
        out_dir = tmp_path / 'hyp'
        output = run('diarize', corpus, out_dir, '--config', small_config_file)
        assert 'Successfully diarized 3 sessions' in output
        records = read_jsonl(out_dir / 'report.jsonl')
        assert [record['mode'] for record in records] == ['clustering'] * 3
        assert all(record['scale_weights'] is None for record in records)
        assert all(record['clustering_weights'] == [1.0, 1.0] for record in records)
        text = (out_dir / 'session-000.rttm').read_text()
        assert text.startswith('SPEAKER session-000 1 ')
        assert 'speaker_0' in text

    def test_msdd_requires_checkpoint(self, tmp_path, corpus, small_config_file):
        with pytest.raises(CommandError, match='--checkpoint'):
            run('diarize', corpus, tmp_path / 'hyp', '--mode', 'msdd', '--config', small_config_file)

    def test_scale_mismatch(self, tmp_path, corpus, small_config_file):
        with pytest.raises(CommandError, match='windows'):
            run('diarize', corpus, tmp_path / 'hyp', '--config', small_config_file, '--preset', 'telephonic')

    def test_missing_input_directory(self, tmp_path, small_config_file):
        with pytest.raises(CommandError, match='not a directory'):
            run('diarize', tmp_path / 'absent', tmp_path / 'hyp', '--config', small_config_file)


class TestTrainAndMsdd:
    def test_train_writes_checkpoint_and_metrics(self, checkpoint):
        manifest = json.loads(checkpoint.with_name('msdd.manifest').read_text())
        assert manifest['shape']['num_scales'] == 2
        assert manifest['shape']['emb_dim'] == 16
        assert manifest['hyper']['max_epochs'] == 2
        metrics = read_jsonl(checkpoint.with_name('msdd.metrics.jsonl'))
        assert [record['epoch'] for record in metrics] == list(range(1, len(metrics) + 1))
        assert checkpoint.with_name('msdd.weights').exists()

    def test_train_is_reproducible(self, tmp_path, corpus, checkpoint, small_config_file):
        again = tmp_path / 'again' / 'msdd'
        run('train', '--train-dir', corpus, '--val-dir', corpus, '--out', again, '--config', small_config_file)
        for suffix in ('.manifest', '.weights', '.metrics.jsonl'):
            assert again.with_name('msdd' + suffix).read_bytes() == checkpoint.with_name('msdd' + suffix).read_bytes()

    def test_msdd_mode(self, tmp_path, corpus, checkpoint, small_config_file):
        out_dir = tmp_path / 'hyp'
        run('diarize', corpus, out_dir, '--mode', 'msdd', '--checkpoint', checkpoint, '--config', small_config_file)
        records = read_jsonl(out_dir / 'report.jsonl')
        assert [record['mode'] for record in records] == ['msdd'] * 3
        for record in records:
            if record['num_speakers'] > 1:
                assert len(record['scale_weights']['mean']) == 2
                assert sum(record['scale_weights']['mean']) == pytest.approx(1.0, abs=1e-5)
                assert max(record['scale_weights']['std']) > 0

    def test_checkpoint_shape_mismatch(self, tmp_path, checkpoint, small_config_file):
        meeting = tmp_path / 'meeting'
        run('synth', meeting, '--config', small_config_file, '--preset', 'meeting', '--num-sessions', 1)
        with pytest.raises(CommandError, match='K=2'):
            run(
                'diarize', meeting, tmp_path / 'hyp', '--mode', 'msdd', '--checkpoint', checkpoint,
                '--config', small_config_file, '--preset', 'meeting',
            )

    def test_missing_checkpoint(self, tmp_path, corpus, small_config_file):
        with pytest.raises(CommandError, match='missing checkpoint'):
            run(
                'diarize', corpus, tmp_path / 'hyp', '--mode', 'msdd', '--checkpoint', tmp_path / 'nothing',
                '--config', small_config_file,
            )

    def test_single_speaker_msdd_matches_clustering(self, tmp_path, checkpoint, small_config_file):
        solo = tmp_path / 'solo'
        run('synth', solo, '--config', small_config_file, '--num-speakers', 1, '--num-sessions', 1)
        run('diarize', solo, tmp_path / 'clustering', '--config', small_config_file)
        run('diarize', solo, tmp_path / 'msdd', '--mode', 'msdd', '--checkpoint', checkpoint,
            '--config', small_config_file)
        [record] = read_jsonl(tmp_path / 'msdd' / 'report.jsonl')
        assert record['num_speakers'] == 1
        assert record['scale_weights'] is None
        clustering = (tmp_path / 'clustering' / 'session-000.rttm').read_text()
        assert (tmp_path / 'msdd' / 'session-000.rttm').read_text() == clustering
        assert clustering.count('SPEAKER') == 1

    def test_train_rejects_three_speakers(self, tmp_path, small_config_file):
        three = tmp_path / 'three'
        run('synth', three, '--config', small_config_file, '--num-speakers', 3, '--num-sessions', 1,
            '--duration', 30)
        with pytest.raises(CommandError, match='exactly 2'):
            run('train', '--train-dir', three, '--val-dir', three, '--out', tmp_path / 'm',
                '--config', small_config_file)


class TestScore:
    def test_reference_against_itself(self, tmp_path, corpus):
        report = tmp_path / 'score.jsonl'
        output = run('score', '--ref-dir', corpus, '--hyp-dir', corpus, '--out', report, '--setup', 'full')
        assert 'DER (full) over 3 sessions: 0.0000' in output
        records = read_jsonl(report)
        assert len(records) == 4
        assert records[-1]['aggregate'] is True
        assert all(record['der'] == 0.0 for record in records)

    def test_scores_clustering_output(self, tmp_path, corpus, small_config_file):
        run('diarize', corpus, tmp_path / 'hyp', '--config', small_config_file)
        report = tmp_path / 'score.jsonl'
        run('score', '--ref-dir', corpus, '--hyp-dir', tmp_path / 'hyp', '--out', report)
        records = read_jsonl(report)
        assert [record['session_id'] for record in records[:-1]] == ['session-000', 'session-001', 'session-002']
        for record in records:
            assert record['setup'] == 'forgiving'
            assert 0.0 <= record['der'] < 1.0

    def test_missing_hypothesis(self, tmp_path, corpus, small_config_file):
        hyp_dir = tmp_path / 'hyp'
        run('diarize', corpus, hyp_dir, '--config', small_config_file)
        (hyp_dir / 'session-001.rttm').unlink()
        with pytest.raises(CommandError, match='no hypothesis for: session-001'):
            run('score', '--ref-dir', corpus, '--hyp-dir', hyp_dir, '--out', tmp_path / 'score.jsonl')


class TestTune:
    def test_clustering_grid(self, tmp_path, corpus, small_config_file):
        report = tmp_path / 'tune.jsonl'
        output = run('tune', corpus, '--config', small_config_file, '--out', report, '--r-grid', 0.5, 1.0, 2.0)
        records = read_jsonl(report)
        assert [(record['parameter'], record['value']) for record in records[:-1]] == [
            ('r', 0.5), ('r', 1.0), ('r', 2.0),
        ]
        best = records[-1]
        assert best['best'] is True
        assert best['threshold'] is None
        assert best['der'] == min(record['der'] for record in records[:-1])
        assert best['r'] == next(record['value'] for record in records if record['der'] == best['der'])
        assert f"Best r={best['r']:g}" in output

    def test_der_matches_score_command(self, tmp_path, corpus, small_config_file):
        report = tmp_path / 'tune.jsonl'
        run('tune', corpus, '--config', small_config_file, '--out', report, '--r-grid', 1.5, '--setup', 'full')
        run('diarize', corpus, tmp_path / 'hyp', '--config', small_config_file, '--r', 1.5)
        run('score', '--ref-dir', corpus, '--hyp-dir', tmp_path / 'hyp', '--out', tmp_path / 'score.jsonl',
            '--setup', 'full')
        scored = read_jsonl(tmp_path / 'score.jsonl')[-1]
        assert read_jsonl(report)[0]['der'] == pytest.approx(scored['der'], abs=1e-3)

    def test_threshold_grid(self, tmp_path, corpus, checkpoint, small_config_file):
        report = tmp_path / 'tune.jsonl'
        output = run(
            'tune', corpus, '--config', small_config_file, '--out', report, '--checkpoint', checkpoint,
            '--r-grid', 1.0, '--threshold-grid', 0.6, 0.8,
        )
        records = read_jsonl(report)
        assert [record['parameter'] for record in records[:-1]] == ['r', 'threshold', 'threshold']
        best = records[-1]
        assert best['r'] == 1.0
        assert best['threshold'] in (0.6, 0.8)
        assert best['der'] == min(record['der'] for record in records[1:-1])
        assert 'T=' in output

    def test_rejects_threshold_outside_unit_interval(self, tmp_path, corpus, checkpoint, small_config_file):
        with pytest.raises(CommandError, match='threshold grid value 1.5'):
            run(
                'tune', corpus, '--config', small_config_file, '--out', tmp_path / 'tune.jsonl',
                '--checkpoint', checkpoint, '--r-grid', 1.0, '--threshold-grid', 0.5, 1.5,
            )

    def test_missing_references(self, tmp_path, corpus, small_config_file):
        (corpus / 'session-002.rttm').unlink()
        with pytest.raises(CommandError, match='session-002 has no reference RTTM'):
            run('tune', corpus, '--config', small_config_file, '--out', tmp_path / 'tune.jsonl')


@pytest.mark.slow
def test_telephonic_benchmark(tmp_path):
    """Default-sized corpus end to end: synthesize, cluster, score"""
    run('synth', tmp_path / 'corpus', '--num-sessions', 20, '--num-speakers', '[2,4]', '--jobs', 4)
    run('diarize', tmp_path / 'corpus', tmp_path / 'hyp', '--jobs', 4)
    run('score', '--ref-dir', tmp_path / 'corpus', '--hyp-dir', tmp_path / 'hyp', '--out', tmp_path / 'score.jsonl')
    aggregate = read_jsonl(tmp_path / 'score.jsonl')[-1]
    assert aggregate['der'] < 0.15
