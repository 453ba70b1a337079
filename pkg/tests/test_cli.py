import json

import pytest

from delaycarto.cli import main
from delaycarto.covmodel import params_to_dict


@pytest.fixture
def files(tmp_path, small_net, small_params):
    topo = tmp_path / "topo.json"
    topo.write_text(json.dumps(small_net.to_dict()))
    params = tmp_path / "params.json"
    params.write_text(json.dumps(params_to_dict(small_params)))
    return tmp_path, str(topo), str(params)


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestCli:
    def test_pipeline(self, files, capsys):
        d, topo, params = files
        trace = str(d / "trace.csv")
        assert _run(capsys, "simulate", "--topology", topo, "--params", params,
                    "--horizon", "300", "--seed", "2", "--out", trace)[0] == 0
        code, out, _ = _run(capsys, "train", "--topology", topo, "--trace", trace,
                            "--t-l", "200", "--burn-in", "100")
        assert code == 0 and "gamma" in json.loads(out)
        assert _run(capsys, "track", "--topology", topo, "--trace", trace, "--params", params,
                    "--out", str(d / "track.csv"))[0] == 0
        code, out, _ = _run(capsys, "select", "--topology", topo, "--params", params,
                            "--policy", "greedy", "--s", "3")
        assert code == 0 and len(json.loads(out)["chosen"]) == 3
        code, out, _ = _run(capsys, "evaluate", "--topology", topo, "--trace", trace,
                            "--params", params, "--t-l", "200", "--s", "4",
                            "--out", str(d / "run"))
        assert code == 0 and json.loads(out)["nmspe"] > 0
        code, out, _ = _run(capsys, "sweep", "--topology", topo, "--simulate", params,
                            "--params", params, "--horizon", "250", "--t-l", "200",
                            "--s", "2,4")
        assert code == 0 and [r["s"] for r in json.loads(out)["sweep"]] == [2, 4]
        assert _run(capsys, "export-map", "--trace", str(d / "run" / "predictions.csv"),
                    "--out", str(d / "map.csv"))[0] == 0
        assert (d / "map.csv").read_text().startswith("path_id,201,")

    def test_rerun_byte_identical(self, files, capsys):
        d, topo, params = files
        outs = []
        for k in range(2):
            run = d / f"run{k}"
            _run(capsys, "evaluate", "--topology", topo, "--simulate", params, "--horizon", "260",
                 "--t-l", "200", "--burn-in", "100", "--s", "3", "--seed", "5", "--out", str(run))
            outs.append(((run / "report.json").read_bytes(),
                         (run / "predictions.csv").read_bytes()))
        assert outs[0] == outs[1]

    def test_error_json(self, files, capsys):
        _, topo, _ = files
        code, _, err = _run(capsys, "evaluate", "--topology", topo, "--trace", "/nonexistent.csv")
        assert code != 0
        assert json.loads(err)["error"]["type"] == "input"

    def test_usage_error_json(self, capsys):
        code, _, err = _run(capsys, "evaluate", "--s", "x")
        assert code == 2 and "error" in json.loads(err)

    def test_missing_topology(self, capsys):
        code, _, err = _run(capsys, "train")
        assert code == 2 and "topology" in json.loads(err)["error"]["message"]

    def test_slot_in_error(self, files, capsys, small_params):
        d, topo, params = files
        bad = d / "bad.csv"
        rows = ["t,path_id,value,measured"]
        for t in range(1, 31):
            for p in range(10):
                missing = (t, p) == (25, 3)
                rows.append(f"{t},{p},{'' if missing else '1.0'},{0 if missing else 1}")
        bad.write_text("\n".join(rows) + "\n")
        code, _, err = _run(capsys, "evaluate", "--topology", topo, "--trace", str(bad),
                            "--params", params, "--t-l", "20", "--s", "3")
        doc = json.loads(err)["error"]
        assert code != 0 and doc["slot"] == 25
