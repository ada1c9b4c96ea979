import attr
import pytest

from revlm.exceptions import InvalidConfigError
from revlm.runconfig import RunConfig, load_run_config


def test_defaults():
    config = RunConfig()
    assert config.block_kind == 'midpoint'
    assert config.data is None
    model = config.model_config(256)
    assert model.vocab_size == 256
    assert model.width == 64
    assert config.optim_config().warmup_steps == 100
    assert config.retrofit_config().kl_learning_rate == 1e-4


def test_text_round_trip():
    config = RunConfig(block_kind='hamiltonian', hamiltonian_a=2.0, hamiltonian_b=-0.5,
                       learning_rate=0.1 + 0.2, data='/tmp/corpus.txt')
    text = config.to_text()
    assert "block_kind=hamiltonian\n" in text
    assert "data=/tmp/corpus.txt\n" in text
    assert "learning_rate=0.30000000000000004\n" in text
    assert RunConfig.from_text(text) == config


def test_text_empty_data():
    config = RunConfig()
    assert "data=\n" in config.to_text()
    assert RunConfig.from_text(config.to_text()).data is None


def test_from_text_errors():
    with pytest.raises(InvalidConfigError):
        RunConfig.from_text("width=8\nnot a pair\n")
    with pytest.raises(InvalidConfigError):
        RunConfig.from_text("depth=8\n")
    with pytest.raises(InvalidConfigError):
        RunConfig.from_text("width=eight\n")
    assert RunConfig.from_text("# comment\n\nwidth = 32\n").width == 32


@pytest.mark.parametrize('options', [
    {'block_kind': 'resnet'},
    {'dtype': 'float16'},
    {'width': 30, 'heads': 4},
    {'batch_size': 0},
    {'val_fraction': 1.0},
    {'warmup_steps': -1},
    {'engine': 'fast'},
])
def test_invalid_values(options):
    with pytest.raises(InvalidConfigError):
        RunConfig.from_mapping(options)


def test_load_precedence(tmpdir):
    p = tmpdir.join("config.yaml")
    p.write(
        """
        model:
          width: 32
          block_kind: leapfrog
        run:
          seed: 3
        """
    )
    config = load_run_config(str(p), overrides={'block_kind': 'midpoint', 'out': None},
                             environ={})
    assert config.width == 32
    assert config.block_kind == 'midpoint'
    assert config.out == 'out'
    assert config.seed == 3


def test_seed_from_environment(tmpdir):
    assert load_run_config(environ={'REVLM_SEED': '11'}).seed == 11
    assert load_run_config(overrides={'seed': 5}, environ={'REVLM_SEED': '11'}).seed == 5
    assert load_run_config(environ={}).seed == 0


def test_retrofit_options():
    config = RunConfig(block_kind='baseline', retrofit_k=3, a_mode='ones', retrofit_skip='estimate',
                       kl_steps=10)
    retrofit = config.retrofit_config()
    assert retrofit.k_fixed_point == 3
    assert retrofit.a_mode == 'ones'
    assert retrofit.skip == 'estimate'
    assert retrofit.kl_steps == 10
    student = attr.evolve(config, block_kind='retrofit')
    assert student.model_config(11).retrofit_skip == 'estimate'


def test_a_schedule_option():
    config = RunConfig.from_mapping({'block_kind': 'midpoint_a', 'layers': 2, 'a_schedule': [1.0, -1.0]})
    assert config.model_config(11).a_schedule == (1.0, -1.0)
    assert "a_schedule=1.0,-1.0\n" in config.to_text()
    assert RunConfig.from_text(config.to_text()) == config
    assert RunConfig.from_text("a_schedule=\n").a_schedule is None
    parsed = RunConfig.from_text("block_kind=midpoint_a\nlayers=3\na_schedule=0.5, -2,1\n")
    assert parsed.model_config(11).a_schedule == (0.5, -2.0, 1.0)


def test_a_schedule_reaches_retrofit():
    config = RunConfig(block_kind='baseline', layers=3, a_schedule='1.5,-0.5')
    retrofit = config.retrofit_config()
    assert retrofit.a_schedule == (1.5, -0.5)
    assert retrofit.schedule(3) == (1.5, -0.5)
    assert config.model_config(11).a_schedule is None
    student = attr.evolve(config, block_kind='retrofit')
    assert student.model_config(11).a_schedule == (1.5, -0.5)


@pytest.mark.parametrize('options', [
    {'block_kind': 'midpoint_a', 'layers': 2, 'a_schedule': '1.0,0.0'},
    {'block_kind': 'midpoint_a', 'layers': 2, 'a_schedule': '1.0,1.0,1.0'},
    {'block_kind': 'retrofit', 'layers': 3, 'a_schedule': '1.0,1.0,1.0'},
    {'a_schedule': 'one,two'},
])
def test_a_schedule_invalid(options):
    with pytest.raises(InvalidConfigError):
        RunConfig.from_mapping(options)
