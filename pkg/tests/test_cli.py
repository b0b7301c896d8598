from importlib import resources

from clustersim.cli import main

BOOT3 = str(resources.files("clustersim") / "scenarios" / "boot3.scn")

GROUP = """seed 4
nodes 3
resource disk type=phys-disk group=g1
resource app type=generic-app group=g1 deps=disk
group g1 preferred=1,2,3
at 3000 online app
at 4000 pause 1
at 6000 resume 1
at 7000 movegroup g1 to 3
at 9000 expect owner g1 is 3
at 9000 expect views agree
"""


def write(tmp_path, text, name="s.scn"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_bundled_scenario_passes(capsys):
    assert main(["run", BOOT3]) == 0
    assert "ok" in capsys.readouterr().out


def test_report_is_deterministic(capsys):
    main(["run", BOOT3, "--seed", "9"])
    first = capsys.readouterr().out
    main(["run", BOOT3, "--seed", "9"])
    assert capsys.readouterr().out == first


def test_trace_file_written(tmp_path):
    out = tmp_path / "trace.txt"
    assert main(["run", BOOT3, "--trace", str(out)]) == 0
    assert "kind=VIEW" in out.read_text()


def test_failed_expectation_exits_1(tmp_path):
    path = write(tmp_path, "nodes 2\nat 3000 expect view 1 active=1\n")
    assert main(["run", path]) == 1


def test_parse_error_exits_2(tmp_path, capsys):
    path = write(tmp_path, "nodes 2\nat 10 explode 1\n")
    assert main(["run", path]) == 2
    assert ":2:" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["run", str(tmp_path / "absent.scn")]) == 2


def test_livelock_exits_3(tmp_path):
    path = write(tmp_path, "config event_ceiling=50\nnodes 3\nuntil 5000\n")
    assert main(["run", path]) == 3


def test_pause_resume_and_move(tmp_path, capsys):
    assert main(["run", write(tmp_path, GROUP)]) == 0, capsys.readouterr().out


def test_dumpdb_and_dumplog(tmp_path, capsys):
    path = write(tmp_path, GROUP + "at 8000 update 2 cfg/x 7\nat 8000 event 2 hello\n")
    assert main(["dumpdb", "3", path]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# version=") and "cfg/x" in out
    assert main(["dumplog", "1", path]) == 0
    assert "hello" in capsys.readouterr().out
    assert main(["dumpdb", "9", path]) == 2


def test_sweep(tmp_path, capsys):
    template = write(tmp_path, "nodes ${N}\nat 4000 expect views agree\n", "t.scn")
    assert main(["sweep", template, "--axis", "N=1..3"]) == 0
    assert "runs=3 violations=0" in capsys.readouterr().out
    assert main(["sweep", template, "--axis", "N=0,2"]) == 2
    assert main(["sweep", template, "--axis", "bad"]) == 2
