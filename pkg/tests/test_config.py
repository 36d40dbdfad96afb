import dataclasses

import pytest

from ttt4rec.config import RunConfig, parse_config
from ttt4rec.errors import ConfigError
from ttt4rec.model import ModelConfig


def test_empty_text_gives_defaults():
    assert parse_config("# nothing\n\n") == RunConfig()


def test_values_and_comments():
    cfg = parse_config("dim = 16  # small\nbackbone=mamba\nadapt_at_eval=false\nratios=6:2:2\nlr=0.01\n")
    assert cfg.model.dim == 16 and cfg.model.backbone == "mamba" and cfg.model.lr == 0.01
    assert cfg.adapt_at_eval is False and cfg.ratios == "6:2:2"


def test_every_problem_reported_together():
    text = "colour=blue\ndim=seven\nbackbone=rnn\nratios=1:2\ncutoffs=10,zero\nadapt_at_eval=maybe\nnot a pair\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    problems = info.value.problems
    assert len(problems) == 7
    joined = "\n".join(problems)
    for key in ("colour", "dim", "backbone", "ratios", "cutoffs", "adapt_at_eval", "line 7"):
        assert key in joined


def test_effective_config_replays_exactly():
    cfg = parse_config("dim=32\ninner=linear\neta_inner=0.05\nseed=7\ncutoffs=5,20\nreport_dir=out\n")
    assert parse_config(cfg.text()) == cfg
    assert parse_config("\n".join("# ignored " + l for l in cfg.lines())) == RunConfig()


def test_every_key_has_a_default():
    run_fields = [f for f in dataclasses.fields(RunConfig) if f.name != "model"]
    assert all(f.default is not dataclasses.MISSING for f in run_fields)
    assert all(f.default is not dataclasses.MISSING for f in dataclasses.fields(ModelConfig))
