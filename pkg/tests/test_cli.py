import numpy as np
import pytest

from point_transformer import cli
from point_transformer import numerics as nx
from point_transformer.data import generate_synthetic, load_cloud, save_cloud
from point_transformer.model import ModelConfig, load_checkpoint
from point_transformer.training import TrainConfig

SMALL = """\
# small enough for a few seconds per epoch
num_points = 64
latent_dim = 16
num_heads = 2
num_sortnets = 1
top_k = 4
reduced_point_set = 4
reduced_dim = 8
local_rff = (8,)
sortnet_rff = (8,)
msg_widths = ((8,), (8,), (8,))
head_fc = (16,)
local_global_layers = 1
train_size = 16
test_size = 8
batch_size = 8
"""


def _config(tmp_path, text=SMALL, name="small.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = _config(root)
    out = root / "run"
    assert cli.main(["train", "--synthetic", "--epochs", "1", "--seed", "7", "--config", cfg, "--out", str(out)]) == 0
    return cfg, out


def test_train_writes_checkpoint_log_and_config(trained):
    _, out = trained
    assert (out / "model.ptfm").exists()
    rows = (out / "metrics.tsv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].split("\t")[0] == "1"
    cfg, _, extra = load_checkpoint(out / "model.ptfm")
    assert (cfg.n, cfg.d_m, cfg.k) == (64, 16, 4)
    assert extra["data"]["seed"] == 7
    assert "d_m = 16" in (out / "config.txt").read_text()


def test_train_same_seed_same_log(tmp_path, trained):
    cfg, out = trained
    again = tmp_path / "again"
    assert cli.main(["train", "--synthetic", "--epochs", "1", "--seed", "7", "--config", cfg, "--out", str(again)]) == 0
    assert (again / "metrics.tsv").read_text() == (out / "metrics.tsv").read_text()


def test_unknown_config_key_is_exit_2(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL + "mystery_knob = 3\n")
    code, _, err = _run(capsys, "train", "--synthetic", "--epochs", "1", "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG
    assert "mystery_knob" in err


def test_invalid_config_value_is_exit_2(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL + "num_heads = 3\n")
    code, _, _ = _run(capsys, "train", "--synthetic", "--epochs", "1", "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG


def test_layer_row_must_end_with_its_width(tmp_path, capsys):
    good = cli.parse_config(SMALL + "local_rff_dims = (8, 16)\n").model_config("classification")
    assert good.local_rff == (8,)
    cfg = _config(tmp_path, SMALL + "local_rff_dims = (8, 12)\n")
    code, _, err = _run(capsys, "train", "--synthetic", "--epochs", "1", "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG and "local_rff_dims" in err


def test_synthetic_cloud_size_floor_is_exit_2(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL.replace("num_points = 64", "num_points = 32"))
    code, _, err = _run(capsys, "train", "--synthetic", "--epochs", "1", "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG and "num_points" in err


def test_class_count_must_match_kinds(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL + "kinds = ('sphere', 'cube')\n")
    code, _, _ = _run(capsys, "train", "--synthetic", "--epochs", "1", "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG


def test_eval_is_unchanged_by_point_shuffling(trained, capsys):
    _, out = trained
    ckpt = str(out / "model.ptfm")
    code, plain, _ = _run(capsys, "eval", "--synthetic", "--checkpoint", ckpt)
    assert code == 0 and plain.startswith("accuracy\t")
    code, shuffled, _ = _run(capsys, "eval", "--synthetic", "--checkpoint", ckpt, "--permute")
    assert code == 0 and shuffled == plain


def test_eval_missing_checkpoint_is_exit_3(tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--synthetic", "--checkpoint", str(tmp_path / "nope.ptfm"))
    assert code == cli.EXIT_DATA and "nope.ptfm" in err


def test_eval_without_checkpoint_flag_is_exit_2(capsys):
    assert _run(capsys, "eval", "--synthetic")[0] == cli.EXIT_CONFIG


def test_checkpoint_config_mismatch_is_exit_2(tmp_path, trained, capsys):
    _, out = trained
    cfg = _config(tmp_path, SMALL.replace("latent_dim = 16", "latent_dim = 32"))
    code, _, err = _run(capsys, "eval", "--synthetic", "--checkpoint", str(out / "model.ptfm"), "--config", cfg)
    assert code == cli.EXIT_CONFIG and "d_m" in err


def test_task_mismatch_is_exit_2(trained, capsys):
    _, out = trained
    code, _, _ = _run(capsys, "eval", "--synthetic", "--task", "segmentation", "--checkpoint", str(out / "model.ptfm"))
    assert code == cli.EXIT_CONFIG


def test_predict_prints_label_and_probability(tmp_path, trained, capsys):
    _, out = trained
    cloud = tmp_path / "ball.txt"
    save_cloud(cloud, generate_synthetic("sphere", 64, seed=1))
    code, text, _ = _run(capsys, "predict", str(cloud), "--checkpoint", str(out / "model.ptfm"))
    path, label, prob = text.strip().split("\t")
    assert code == 0 and path == str(cloud)
    assert 0 <= int(label) < 4 and 0.25 <= float(prob) <= 1.0


def test_predict_missing_file_is_exit_3(tmp_path, trained, capsys):
    _, out = trained
    code, _, _ = _run(capsys, "predict", str(tmp_path / "gone.txt"), "--checkpoint", str(out / "model.ptfm"))
    assert code == cli.EXIT_DATA


def test_dump_selections_writes_subsets_of_the_cloud(tmp_path, trained, capsys):
    _, out = trained
    dump = tmp_path / "dump"
    code, text, _ = _run(capsys, "dump-selections", "--synthetic", "--index", "2", "--checkpoint", str(out / "model.ptfm"), "--out", str(dump))
    assert code == 0 and text.startswith("sortnet0\t4 points")
    cloud = load_cloud(dump / "cloud.txt").cloud
    picked = load_cloud(dump / "sortnet0.txt").cloud
    assert picked.shape == (4, 6)
    assert all((cloud == row).all(axis=1).any() for row in picked)
    assert len({tuple(r) for r in picked}) == 4
    np.testing.assert_array_equal(np.loadtxt(dump / "rotation.txt"), np.eye(3))


def test_dump_selections_rotation_is_recorded(tmp_path, trained, capsys):
    _, out = trained
    dump = tmp_path / "dump"
    assert _run(capsys, "dump-selections", "--synthetic", "--rotate", "--seed", "4", "--checkpoint", str(out / "model.ptfm"), "--out", str(dump))[0] == 0
    rot = np.loadtxt(dump / "rotation.txt")
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0)


def test_dump_selections_bad_index_is_exit_3(trained, capsys):
    _, out = trained
    code, _, _ = _run(capsys, "dump-selections", "--synthetic", "--index", "99", "--checkpoint", str(out / "model.ptfm"))
    assert code == cli.EXIT_DATA


def test_bench_reports_growing_times_and_exponent(capsys):
    code, text, _ = _run(capsys, "bench", "--sizes", "64,256,1024", "--repeats", "2")
    lines = text.strip().splitlines()
    assert code == 0 and lines[0] == "n\tseconds"
    times = [float(line.split("\t")[1]) for line in lines[1:4]]
    assert times == sorted(times)
    assert lines[-1].startswith("exponent\t")


def test_gradcheck_passes(capsys):
    code, text, _ = _run(capsys, "gradcheck")
    lines = text.strip().splitlines()
    assert code == 0 and lines[-1] == "PASS"
    assert lines[1].startswith("worst\t") and float(lines[1].split("\t")[2]) < 1e-4


def test_gradcheck_catches_a_broken_backward_rule(monkeypatch, capsys):
    rule = nx.BACKWARD_RULES["linear"]

    def broken(g, node):
        return [None if x is None else 1.01 * x for x in rule(g, node)]

    monkeypatch.setitem(nx.BACKWARD_RULES, "linear", broken)
    code, text, _ = _run(capsys, "gradcheck")
    assert code == cli.EXIT_RUNTIME
    assert text.strip().splitlines()[-1] == "FAIL"
    assert text.splitlines()[1].split("\t")[1]  # names the worst parameter


def test_ablation_prints_three_accuracies(tmp_path, capsys):
    cfg = _config(tmp_path)
    code, text, _ = _run(capsys, "ablation", "--synthetic", "--epochs", "1", "--config", cfg, "--out", str(tmp_path))
    lines = text.strip().splitlines()
    assert code == 0 and lines[0] == "variant\taccuracy"
    assert [line.split("\t")[0] for line in lines[1:]] == ["learned", "fps", "random"]
    assert all(0.0 <= float(line.split("\t")[1]) <= 1.0 for line in lines[1:])
    assert (tmp_path / "ablation.tsv").read_text().strip() == text.strip()


def test_segmentation_train_and_eval(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL + "num_sortnets = 2\nsegmentation_dim = 8\nseg_rff = (8,)\nseg_head = (8,)\n")
    out = tmp_path / "seg"
    code, _, _ = _run(capsys, "train", "--synthetic", "--task", "segmentation", "--epochs", "1", "--config", cfg, "--out", str(out))
    assert code == 0
    code, text, _ = _run(capsys, "eval", "--synthetic", "--checkpoint", str(out / "model.ptfm"))
    assert code == 0 and "miou\t" in text


def test_config_dump_round_trip():
    cfg = ModelConfig.desk(k=8, head_fc=(32,))
    train = TrainConfig(batch_size=4, lr=2e-3)
    data = {"train_size": 10, "test_size": 5, "kinds": ("sphere", "cube"), "noise": 0.0}
    run = cli.parse_config(cli.dump_config(cfg, train, data))
    assert run.model_config(cfg.task) == cfg
    assert run.train_config(train.seed, None) == train
    assert run.data_settings() == data


def test_table_names_map_to_fields():
    run = cli.parse_config("learning_rate = 0.005\nweight_decay = 0.0001\ntop_k = 16\nnum_sortnets = 10\n")
    assert run.train == {"lr": 0.005, "weight_decay": 0.0001}
    cfg = run.model_config("classification")
    assert (cfg.k, cfg.m) == (16, 10)


def test_malformed_config_line(tmp_path, capsys):
    cfg = _config(tmp_path, "latent_dim 16\n")
    code, _, err = _run(capsys, "train", "--synthetic", "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG and ":1:" in err


def test_missing_manifest_is_exit_3(tmp_path, capsys):
    cfg = _config(tmp_path)
    code, _, _ = _run(capsys, "train", "--data", str(tmp_path / "none.txt"), "--config", cfg, "--out", str(tmp_path))
    assert code == cli.EXIT_DATA



def test_segmentation_runs_default_to_segmentation_hyperparameters():
    run = cli.parse_config("weight_decay = 0.5\n")
    seg = run.train_config(0, None, "segmentation")
    assert (seg.batch_size, seg.lr, seg.weight_decay) == (8, 5e-3, 0.5)
    assert run.train_config(0, None).lr == 1e-3
