import subprocess
from pathlib import Path

import pytest
import tomli

rootdir = Path(".")
pyproject = rootdir / "pyproject.toml"
scripts = list(tomli.load(pyproject.open("rb"))["project"]["scripts"].keys())
subcommands = ["train", "eval", "ablate"]


@pytest.mark.parametrize("cli", scripts)
def test_cli_help(cli):
    subprocess.check_call([cli, "--help"])


@pytest.mark.parametrize("cli", scripts)
@pytest.mark.parametrize("sub", subcommands)
def test_cli_subcommand_h(cli, sub):
    subprocess.check_call([cli, sub, "-h"])


@pytest.mark.parametrize("cli", scripts)
def test_cli_version(cli):
    out = subprocess.check_output([cli, "--version"], text=True)
    assert "version" in out
