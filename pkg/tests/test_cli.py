import subprocess
import sys

import pytest

from relfuse.harness.cli import main
from relfuse.harness.config import load_config, parse_config
from relfuse.uta import ConfigError

SMALL = """\
# tiny run
data.train = 12
data.val = 0
data.test = 4   # trailing comment
train.epochs = 1
train.batch = 6
eval.seeds = 0
"""


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.model.top_k == 3 and cfg.train.lam == 1e-4 and cfg.train.epochs == 80
        assert cfg.eval.magnitudes == (0, 5, 10, 20, 40)
        assert cfg.manifest.counts == {"train": 500, "val": 200, "test": 300}

    def test_keys_applied(self):
        cfg = parse_config("uta.lambda = 2e-4\nuta.epsilon=1e-7\nuta.offset_clamp = 3\nrmoe.top_k = 2\n"
                           "train.beta = 0.5\neval.magnitudes = 0, 10\n")
        assert cfg.train.lam == 2e-4 and cfg.train.epsilon == 1e-7 and cfg.model.offset_clamp == 3.0
        assert cfg.model.top_k == 2 and cfg.train.beta == 0.5 and cfg.eval.magnitudes == (0, 10)

    @pytest.mark.parametrize("text", ["uta.lambda = 0", "rmoe.top_k = 4", "rmoe.num_experts = 2",
                                      "train.lr = abc", "no.such.key = 1", "just a line", "uta.epsilon = -1"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCli:
    def test_unknown_flag_is_usage_error(self, capsys):
        code, _, err = run(["gradcheck", "--bogus"], capsys)
        assert code == 1 and "usage:" in err

    def test_unknown_subcommand(self, capsys):
        code, _, err = run(["frobnicate"], capsys)
        assert code == 1 and "usage:" in err

    def test_missing_dataset_path(self, tmp_path, capsys):
        missing = tmp_path / "no_dataset_here"
        code, _, err = run(["train", "--data", str(missing), "--out", str(tmp_path / "ck")], capsys)
        assert code == 2 and str(missing) in err

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, err = run(["--config", str(tmp_path / "nope.cfg"), "gradcheck"], capsys)
        assert code == 2 and "nope.cfg" in err

    def test_bad_config_value(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("rmoe.top_k = 7\n")
        code, _, err = run(["--config", str(cfg), "gradcheck"], capsys)
        assert code == 1 and "rmoe.top_k" in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(["routing-stats", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "ck")], capsys)
        assert code == 2

    def test_full_flow(self, tmp_path, capsys):
        cfg = tmp_path / "small.cfg"
        cfg.write_text(SMALL)
        data, ck, rep = tmp_path / "data", tmp_path / "ck", tmp_path / "rep"
        assert run(["--config", str(cfg), "generate", "--out", str(data)], capsys)[0] == 0
        assert run(["--config", str(cfg), "train", "--data", str(data), "--out", str(ck)], capsys)[0] == 0
        assert (ck / "loss_log.csv").read_text().startswith("epoch,l_det,l_ta,l_uta,total\n")
        code, out, _ = run(["--config", str(cfg), "eval-shift", "--data", str(data), "--checkpoint", str(ck),
                            "--out", str(rep)], capsys)
        assert code == 0
        shifts = {line.split(",")[0] for line in (rep / "shift.csv").read_text().splitlines()[1:]}
        assert shifts == {"0", "5", "10", "20", "40"}
        assert "40 px" in out
        code, out, _ = run(["--config", str(cfg), "routing-stats", "--data", str(data), "--checkpoint", str(ck),
                            "--out", str(rep)], capsys)
        assert code == 0 and (rep / "routing.csv").exists()
        code, out, _ = run(["--config", str(cfg), "sweep-topk", "--data", str(data), "--k", "1", "--seeds", "0",
                            "--out", str(rep)], capsys)
        assert code == 0 and (rep / "topk.csv").read_text().startswith("k,seed,ap50,ap75,ap5095,active_params\n")

    def test_numerical_failure_exit_code(self, tmp_path, capsys, monkeypatch):
        from relfuse.harness import cli
        from relfuse.training import NumericalError

        def boom(*a, **k):
            raise NumericalError("training diverged at epoch 1: total loss nan")

        cfg = tmp_path / "small.cfg"
        cfg.write_text(SMALL)
        assert run(["--config", str(cfg), "generate", "--out", str(tmp_path / "d")], capsys)[0] == 0
        monkeypatch.setattr(cli, "train", boom)
        code, _, err = run(["--config", str(cfg), "train", "--data", str(tmp_path / "d")], capsys)
        assert code == 3 and "nan" in err


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "relfuse.harness.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("generate", "train", "eval-shift", "sweep-topk", "routing-stats", "gradcheck"):
        assert sub in proc.stdout
