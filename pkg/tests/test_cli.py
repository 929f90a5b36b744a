"""CLI surface: subcommands, error diagnostics, replay/dedupe contracts."""

import json
import os
import subprocess
import sys

import pytest

from fuzzemu import cli
from fuzzemu.asm import assemble

TARGET = os.path.join(os.path.dirname(__file__), "..", "targets", "fivebugs.json")


def run_cli(capsys, *argv):
    rc = cli.main(list(argv))
    cap = capsys.readouterr()
    return rc, cap.out, cap.err


# ---------------------------------------------------------------------------
# run


def test_run_benign_input_prints_exit(tmp_path, capsys):
    inp = tmp_path / "in"
    inp.write_bytes(b"\x00")
    rc, out, _ = run_cli(capsys, "run", "--config", TARGET, "--input", str(inp))
    assert rc == 0
    assert out.startswith("Exit(code=0")
    rc2, out2, _ = run_cli(capsys, "run", "--config", TARGET, "--input", str(inp))
    assert (rc2, out2) == (rc, out)  # replay is deterministic


def test_run_crash_input_prints_crash_id(tmp_path, capsys):
    inp = tmp_path / "in"
    inp.write_bytes(b"wzfc" + b"\x00" * 12)
    rc, out, _ = run_cli(capsys, "run", "--config", TARGET, "--input", str(inp))
    assert rc == 0
    assert out.startswith("Crash(id=3, pc=0x")


def test_run_mem_fault_prints_dedupe_label(tmp_path, capsys):
    src = """
    start:
        li t0, 0x30
        sw t0, 0(t0)
    """
    code, _, _ = assemble(src, base=0x1000)
    (tmp_path / "t.bin").write_bytes(code)
    cfg = {"entry": "0x1000", "env_base": "0xFFFF0000", "regions": [
        {"name": "code", "start": "0x1000", "size": "0x1000", "perms": "rx", "file": "t.bin"}]}
    cfgp = tmp_path / "t.json"
    cfgp.write_text(json.dumps(cfg))
    inp = tmp_path / "in"
    inp.write_bytes(b"")
    rc, out, _ = run_cli(capsys, "run", "--config", str(cfgp), "--input", str(inp))
    assert rc == 0
    assert "Fault(mem-unmapped-0x30" in out


def test_run_reproduces_dedupe_key_for_every_stored_crash(tmp_path, capsys):
    from fuzzemu.fuzzer import campaign

    out_dir = tmp_path / "camp"
    campaign(TARGET, instr=("cov", "cmplog"), seed=11, max_execs=4000,
             out_dir=str(out_dir))
    names = os.listdir(out_dir / "crashes")
    assert names
    for name in names:
        rc, out, _ = run_cli(capsys, "run", "--config", TARGET,
                             "--input", str(out_dir / "crashes" / name))
        assert rc == 0
        if name.startswith("crash-port-"):
            bug = name.rsplit("-", 1)[1]
            assert out.startswith(f"Crash(id={bug}, ")
        else:
            assert name in out


def test_run_dump_cov_then_report(tmp_path, capsys):
    inp = tmp_path / "in"
    inp.write_bytes(b"\x00")
    dump = tmp_path / "cov.bin"
    rc, out, _ = run_cli(capsys, "run", "--config", TARGET, "--input", str(inp),
                         "--dump-cov", str(dump))
    assert rc == 0 and dump.is_file()
    rc, out, _ = run_cli(capsys, "cov-report", str(dump))
    assert rc == 0
    assert out.splitlines()[0].startswith("cells=65536 nonzero=")
    assert "bucket" in out


def test_run_dump_cmplog_requires_cmplog_instr(tmp_path, capsys):
    inp = tmp_path / "in"
    inp.write_bytes(b"\x00")
    rc, _, err = run_cli(capsys, "run", "--config", TARGET, "--input", str(inp),
                         "--dump-cmplog", str(tmp_path / "c.bin"))
    assert rc == 2
    assert "cmplog" in err
    rc, out, _ = run_cli(capsys, "run", "--config", TARGET, "--input", str(inp),
                         "--instr", "cov,cmplog", "--dump-cmplog", str(tmp_path / "c.bin"))
    assert rc == 0
    assert (tmp_path / "c.bin").is_file()


def test_run_missing_input_diagnostic(tmp_path, capsys):
    rc, _, err = run_cli(capsys, "run", "--config", TARGET,
                         "--input", str(tmp_path / "nope"))
    assert rc == 2
    assert "nope" in err


# ---------------------------------------------------------------------------
# fuzz


def test_fuzz_campaign_writes_outputs_and_prints_stats(tmp_path, capsys):
    out = tmp_path / "out"
    rc, stdout, _ = run_cli(
        capsys, "fuzz", "--config", TARGET, "--instr", "cov",
        "--max-execs", "600", "--seed", "1", "--out", str(out),
        "--stats-every", "200",
    )
    assert rc == 0
    lines = [ln for ln in stdout.splitlines() if "queue=" in ln and "buckets=" in ln]
    assert len(lines) >= 2  # periodic stats lines
    assert (out / "stats.json").is_file()
    assert (out / "campaign.json").is_file()
    assert sorted(os.listdir(out / "queue"))


def test_fuzz_is_deterministic_per_spec_example(tmp_path, capsys):
    args = ["fuzz", "--config", TARGET, "--instr", "cov", "--max-execs", "400",
            "--seed", "1"]
    rc1, _, _ = run_cli(capsys, *args, "--out", str(tmp_path / "a"))
    rc2, _, _ = run_cli(capsys, *args, "--out", str(tmp_path / "b"))
    assert rc1 == rc2 == 0
    assert (tmp_path / "a" / "stats.json").read_bytes() == \
        (tmp_path / "b" / "stats.json").read_bytes()


def test_fuzz_unknown_instrumentation_lists_valid_names(tmp_path, capsys):
    rc, _, err = run_cli(capsys, "fuzz", "--config", TARGET, "--instr", "bogus",
                         "--max-execs", "10", "--out", str(tmp_path / "o"))
    assert rc == 2
    for name in ("cov", "context", "cmplog", "comparecov"):
        assert name in err


def test_fuzz_missing_config_diagnostic(tmp_path, capsys):
    missing = str(tmp_path / "absent.json")
    rc, _, err = run_cli(capsys, "fuzz", "--config", missing,
                         "--max-execs", "10", "--out", str(tmp_path / "o"))
    assert rc == 2
    assert missing in err


def test_fuzz_missing_image_diagnostic(tmp_path, capsys):
    cfg = {"entry": "0x1000", "regions": [
        {"name": "code", "start": "0x1000", "size": "0x1000", "perms": "rx",
         "file": "not_there.bin"}]}
    cfgp = tmp_path / "t.json"
    cfgp.write_text(json.dumps(cfg))
    rc, _, err = run_cli(capsys, "fuzz", "--config", str(cfgp),
                         "--max-execs", "10", "--out", str(tmp_path / "o"))
    assert rc == 2
    assert "not_there.bin" in err


def test_fuzz_requires_some_budget(tmp_path, capsys):
    rc, _, err = run_cli(capsys, "fuzz", "--config", TARGET, "--out", str(tmp_path / "o"))
    assert rc == 2
    assert "budget" in err


def test_fuzz_seed_dir_inputs_are_used(tmp_path, capsys):
    sd = tmp_path / "seeds"
    sd.mkdir()
    (sd / "a").write_bytes(b"wzfc" + b"\x00" * 12)
    out = tmp_path / "out"
    rc, stdout, _ = run_cli(capsys, "fuzz", "--config", TARGET, "--instr", "cov",
                            "--max-execs", "50", "--out", str(out),
                            "--seed-dir", str(sd))
    assert rc == 0
    assert "crash-port-3" in stdout  # the seed itself crashes bug 3


def test_fuzz_workers_make_independent_campaigns(tmp_path, capsys):
    out = tmp_path / "out"
    rc, stdout, _ = run_cli(capsys, "fuzz", "--config", TARGET, "--instr", "cov",
                            "--max-execs", "200", "--seed", "5", "--out", str(out),
                            "--workers", "2")
    assert rc == 0
    camps = []
    for w in ("worker-00", "worker-01"):
        p = out / w / "campaign.json"
        assert p.is_file()
        camps.append(json.loads(p.read_text()))
    assert camps[0]["seed"] == 5 and camps[1]["seed"] == 6


# ---------------------------------------------------------------------------
# analyze-cmps


def test_analyze_lists_magic_word_site_and_is_stable(capsys):
    rc1, out1, _ = run_cli(capsys, "analyze-cmps", "--config", TARGET)
    rc2, out2, _ = run_cli(capsys, "analyze-cmps", "--config", TARGET)
    assert rc1 == rc2 == 0
    assert out1 == out2
    magic = [ln for ln in out1.splitlines() if "0x63667a77" in ln]
    assert magic, out1
    assert "width=4" in magic[0]
    assert "NE" in magic[0] or "EQ" in magic[0]


def test_analyze_comparison_free_image_lists_nothing(tmp_path, capsys):
    src = """
    start:
        li a7, 0
        li a0, 0
        ecall
    """
    code, _, _ = assemble(src, base=0x1000)
    (tmp_path / "t.bin").write_bytes(code)
    cfg = {"entry": "0x1000", "env_base": "0xFFFF0000", "regions": [
        {"name": "code", "start": "0x1000", "size": "0x1000", "perms": "rx", "file": "t.bin"}]}
    cfgp = tmp_path / "t.json"
    cfgp.write_text(json.dumps(cfg))
    rc, out, _ = run_cli(capsys, "analyze-cmps", "--config", str(cfgp))
    assert rc == 0
    assert out == ""


# ---------------------------------------------------------------------------
# cov-report error path and console entry


def test_cov_report_rejects_bad_dump(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 64)
    rc, _, err = run_cli(capsys, "cov-report", str(bad))
    assert rc == 2
    assert "magic" in err


def test_module_is_invocable_as_script(tmp_path):
    inp = tmp_path / "in"
    inp.write_bytes(b"%" + b"\x00" * 15)
    proc = subprocess.run(
        [sys.executable, "-m", "fuzzemu.cli", "run", "--config", TARGET,
         "--input", str(inp)],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert proc.stdout.startswith("Crash(id=1, ")
