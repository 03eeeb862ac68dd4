import json

import pandas as pd
import pytest
from click.testing import CliRunner

from applier import TransformSpec
from attack_engine import AttackConfig, optimize_patch
from core import BoundingBox, DetectionSet, GroundTruthSet
from errors import InvalidConfigError
from experiment_runner import (AttackEntry, ExperimentConfig, group_reports, load_records, resolve, run_eval,
                               run_report)
from image_io import save_patch
from leaderboard import BASELINE, BEST, SECOND, Leaderboard
from main import cli
from metrics import EvalRecord


def published_board():
    cells = {('YOLOv2', 'SAC'): (0.5208, 0.2923), ('YOLOv2', 'NutNet'): (0.6868, 0.6503)}
    return Leaderboard.from_cells(cells, {'YOLOv2': (0.2400, 0.1200)}, {'SAC': 44.0, 'NutNet': 30.0})


def test_markers_follow_row_ranking():
    board = published_board()
    assert board.best('YOLOv2') == 'NutNet'
    assert board.best('YOLOv2', 'min_ap') == 'NutNet'
    assert board.cells[('YOLOv2', 'SAC')].mean_marker == SECOND
    markdown = board.to_markdown()
    assert '**68.68** / **65.03**' in markdown
    assert '<u>52.08</u> / <u>29.23</u>' in markdown
    assert '| YOLOv2 | 24.00 / 12.00 |' in markdown
    assert markdown.splitlines()[-1] == '| Time cost (ms) | - | 44 | 30 |'


def test_mean_and_min_are_marked_separately():
    cells = {('d', 'a'): (0.9, 0.1), ('d', 'b'): (0.5, 0.4), ('d', 'c'): (0.7, 0.3)}
    board = Leaderboard.from_cells(cells)
    assert board.best('d') == 'a'
    assert board.best('d', 'min_ap') == 'b'
    assert board.cells[('d', 'c')].mean_marker == SECOND
    assert board.cells[('d', 'c')].min_marker == SECOND


def test_single_defense_is_best_and_empty_board_is_header_only():
    board = Leaderboard.from_cells({('toy', 'lgs'): (0.5, 0.5)})
    assert board.cells[('toy', 'lgs')].mean_marker == BEST
    assert Leaderboard().to_markdown() == '| Detector | w/o defense |\n|---|---|\n'


def test_undefined_cells_render_as_dash():
    board = Leaderboard.from_cells({('toy', 'lgs'): (None, None), ('toy', 'entropy'): (0.4, 0.2)})
    assert board.cells[('toy', 'lgs')].mean_marker is None
    assert '| toy | - | - / - | **40.00** / **20.00** |' in board.to_markdown()
    frame = board.to_frame()
    assert list(frame['defense']) == ['lgs', 'entropy']


def record(attack, defense, found, image_id='img'):
    gt = [BoundingBox(0, 0, 10, 10)]
    dets = [BoundingBox(0, 0, 10, 10, score=0.9)] if found else []
    return EvalRecord(image_id, attack, defense, 'toy', DetectionSet(image_id, dets), GroundTruthSet(image_id, gt))


def test_from_records_takes_mean_and_min_over_attacks():
    records = [
        record('a1', 'lgs', True, 'i1'), record('a1', 'lgs', True, 'i2'),
        record('a2', 'lgs', True, 'i1'), record('a2', 'lgs', False, 'i2'),
        record('a1', BASELINE, False, 'i1'), record('a1', BASELINE, False, 'i2'),
        record('clean', 'lgs', False, 'i1'),
    ]
    board = Leaderboard.from_records(records)
    cell = board.cells[('toy', 'lgs')]
    assert cell.mean_ap == pytest.approx(0.75)
    assert cell.min_ap == pytest.approx(0.5)
    assert board.baseline['toy'].mean_ap == 0.0
    assert board.defenses == ['lgs']


def quick_config(tmp_path, **kwargs):
    row = dict(attacks=['random'], toy_images=3, timing=False, out_dir=str(tmp_path))
    row.update(kwargs)
    return ExperimentConfig.from_dict(row)


def test_config_rejects_unknown_keys_and_sections(tmp_path):
    with pytest.raises(InvalidConfigError):
        ExperimentConfig.from_dict({'bogus': 1})
    with pytest.raises(InvalidConfigError):
        quick_config(tmp_path, settings={'warp': {}})
    with pytest.raises(InvalidConfigError):
        quick_config(tmp_path, settings={'lgs': {'radius': 3}})
    with pytest.raises(InvalidConfigError):
        AttackEntry.parse('teleport')


def test_resolve_rejects_duplicate_defense_names(tmp_path):
    with pytest.raises(InvalidConfigError):
        resolve(quick_config(tmp_path, defenses=['lgs', 'lgs']))
    with pytest.raises(InvalidConfigError):
        resolve(quick_config(tmp_path, defenses=[{'id': 'identity', 'name': BASELINE}]))
    with pytest.raises(FileNotFoundError):
        resolve(quick_config(tmp_path, attacks=[{'id': 'file', 'path': str(tmp_path / 'missing.png')}]))


def test_empty_defense_list_gives_baseline_only(tmp_path):
    archive = run_eval(quick_config(tmp_path, defenses=[]))
    assert {r.defense_name for r in archive.records} == {BASELINE}
    assert archive.leaderboard.defenses == []
    assert 'toy' in archive.leaderboard.baseline
    assert archive.leaderboard.to_markdown().startswith('| Detector | w/o defense |')
    assert len(archive.records) == 6


def test_identity_defense_matches_no_defense(tmp_path):
    archive = run_eval(quick_config(tmp_path, defenses=['identity']))
    plain, identity = archive.reports[BASELINE], archive.reports['identity']
    assert abs(plain.ap50 - identity.ap50) < 1e-9
    assert abs(plain.asr - identity.asr) < 1e-9
    assert identity.smiou == 0.0
    assert archive.gains == {'identity': 0.0}
    assert archive.clean_reports[BASELINE].ap50 == 1.0


def test_run_is_archived_and_rerunnable(tmp_path):
    cfg = quick_config(tmp_path, defenses=['identity', 'lgs'])
    archive = run_eval(cfg)
    log = json.loads((tmp_path / 'run_log.json').read_text(encoding='utf-8'))
    assert log['command'] == 'evaluate'
    assert log['seeds']['root'] == cfg.seed
    assert 'torch' in log['versions']
    assert ExperimentConfig.from_json(str(tmp_path / 'run_log.json')).to_dict() == cfg.to_dict()

    records = load_records(tmp_path / 'records.jsonl')
    assert len(records) == len(archive.records)
    rebuilt = tmp_path / 'rebuilt'
    run_report(str(tmp_path / 'records.jsonl'), quick_config(rebuilt))
    assert (rebuilt / 'leaderboard.md').read_text(encoding='utf-8') == archive.leaderboard.to_markdown()
    assert (tmp_path / 'metrics_w_o_defense.json').exists()


def hidden_noise_patch(toy_detector, toy_corpus, path):
    """Шумовой патч, оптимизированный градиентным шагом на скрытие человека"""
    cfg = AttackConfig(init='random', patch_size=12, step_rule='gradient', learning_rate=0.2, steps=100, seed=0)
    patch, _ = optimize_patch(toy_corpus, toy_detector, cfg, transform_spec=TransformSpec.identity(0.25))
    patch.meta.update({'attack_name': 'noise-hiding', 'patch_id': 'noise-hiding'})
    return save_patch(patch, path)


@pytest.mark.slow
def test_prior_based_defenses_recover_optimized_patch(tmp_path, toy_detector, toy_corpus):
    path = hidden_noise_patch(toy_detector, toy_corpus, tmp_path / 'patches' / 'noise.png')
    cfg = quick_config(tmp_path, attacks=[{'id': 'file', 'path': path}], defenses=['lgs', 'entropy'],
                       toy_images=4, timing=True, settings={'transform': {'scale_ratio': [0.25, 0.25]}})
    archive = run_eval(cfg)
    assert archive.reports[BASELINE].asr >= 0.75
    for name in ('lgs', 'entropy'):
        assert archive.reports[name].asr <= 0.3, name
        assert archive.reports[name].smiou > 0.4, name
        assert archive.gains[name] > 0.5, name
        assert archive.time_cost_ms[name] > 0.0
    assert archive.leaderboard.best('toy') in ('lgs', 'entropy')
    assert archive.failures == []


def test_cli_report_uses_config_and_metric_settings(tmp_path):
    run_eval(quick_config(tmp_path, defenses=['identity']))
    config_path = tmp_path / 'report.json'
    config_path.write_text(json.dumps({'settings': {'metrics': {'size_bins': [0.0, 0.5, 1.0]}}}),
                           encoding='utf-8')
    out = tmp_path / 'report_out'
    result = CliRunner().invoke(cli, ['report', str(tmp_path / 'records.jsonl'), '--config', str(config_path),
                                      '--seed', '5', '--workers', '2', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert (out / 'leaderboard.md').exists()
    log = json.loads((out / 'report_log.json').read_text(encoding='utf-8'))
    assert log['command'] == 'report'
    assert log['seeds']['root'] == 5
    assert log['config']['workers'] == 2
    assert log['config']['settings']['metrics']['size_bins'] == [0.0, 0.5, 1.0]


def test_parallel_report_matches_serial(tmp_path):
    archive = run_eval(quick_config(tmp_path, defenses=['identity', 'lgs']))
    serial = group_reports(archive.records)[0]
    parallel = group_reports(archive.records, workers=3)[0]
    assert serial.keys() == parallel.keys()
    for name in serial:
        assert serial[name].to_dict() == parallel[name].to_dict()


def test_cli_evaluate_and_errors(tmp_path):
    config_path = tmp_path / 'run.json'
    config_path.write_text(json.dumps({'defenses': ['identity'], 'attacks': ['random'], 'toy_images': 2,
                                       'timing': False}), encoding='utf-8')
    runner = CliRunner()
    result = runner.invoke(cli, ['evaluate', '--config', str(config_path), '--out', str(tmp_path / 'out')])
    assert result.exit_code == 0, result.output
    assert 'w/o defense' in result.output
    assert (tmp_path / 'out' / 'leaderboard.md').exists()

    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps({'defenses': ['mirror']}), encoding='utf-8')
    result = runner.invoke(cli, ['evaluate', '--config', str(bad), '--out', str(tmp_path / 'bad_out')])
    assert result.exit_code == 1
    assert '❌' in result.output


def test_cli_physical(tmp_path):
    person = json.dumps([{'box': [0, 0, 10, 20], 'class_id': 0}])
    rows = [{'frame_id': str(i), 'distance_m': d, 'angle_deg': 0, 'light_level': 2, 'defense_name': 'lgs',
             'detector_name': 'toy', 'detections': '[]', 'ground_truth': person} for i, d in enumerate((3, 9))]
    table = tmp_path / 'physical.csv'
    pd.DataFrame(rows).to_csv(table, index=False)
    out = tmp_path / 'agg.csv'
    result = CliRunner().invoke(cli, ['physical', str(table), '--by', 'distance', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out)['asr'].tolist() == [1.0, 1.0]
