import json

import pytest

import config
from config import parse_config
from errors import ConfigError


@pytest.fixture
def config_file(tmp_path):
    def write(data):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps(data) if not isinstance(data, str) else data)
        return path
    return write


class TestDefaults:
    def test_documented_values(self):
        cfg = parse_config()
        assert cfg.fista.lam == 0.0005
        assert cfg.fista.max_iters == 500
        assert cfg.segmentation.stride == 5
        assert cfg.segmentation.window == 32
        assert cfg.segmentation.tau == 0.5
        assert cfg.flow.mu == 0.01
        assert cfg.ref_index == 1

    def test_dict_uses_public_key_names(self):
        data = parse_config().to_dict()
        assert data['fista']['lambda'] == 0.0005
        assert 'lam' not in data['fista']
        assert data['io']['keep_intermediates'] is False

    def test_dotted_keys(self):
        keys = config.dotted_keys()
        assert 'fista.lambda' in keys
        assert 'segmentation.tau' in keys
        assert 'seed' in keys and 'ref_index' in keys


class TestPrecedence:
    def test_file_overrides_defaults(self, config_file):
        cfg = parse_config(config_file({'segmentation': {'stride': 3}, 'seed': 9}))
        assert cfg.segmentation.stride == 3
        assert cfg.seed == 9

    def test_flags_override_file(self, config_file):
        path = config_file({'fista': {'lambda': 0.002}})
        assert parse_config(path).fista.lam == 0.002
        assert parse_config(path, {'lambda': '0.001'}).fista.lam == 0.001
        assert parse_config(path, {'fista.lambda': '0.003'}).fista.lam == 0.003

    def test_string_values_are_coerced(self):
        cfg = parse_config(overrides={'stride': '4', 'io.keep_intermediates': 'yes', 'fista.eps_stop': 'none'})
        assert cfg.segmentation.stride == 4
        assert cfg.io.keep_intermediates is True
        assert cfg.fista.eps_stop is None


class TestValidation:
    def test_tau_out_of_range_names_key(self, config_file):
        with pytest.raises(ConfigError) as exc:
            parse_config(config_file({'segmentation': {'tau': 1.5}}))
        assert exc.value.key == 'segmentation.tau'
        assert 'tau' in str(exc.value)

    @pytest.mark.parametrize('data,key', [
        ({'fista': {'gamma': 1}}, 'fista.gamma'),
        ({'optimizer': {}}, 'optimizer'),
        ({'flow': {'pyramid_ratio': 0.95}}, 'flow.pyramid_ratio'),
        ({'segmentation': {'stride': 2.5}}, 'segmentation.stride'),
        ({'segmentation': {'stride': 'abc'}}, 'segmentation.stride'),
        ({'fista': {'lambda': -1}}, 'fista.lambda'),
        ({'segmentation': {'feature_backend': 'fvec'}}, 'segmentation.feature_file'),
    ])
    def test_rejected(self, config_file, data, key):
        with pytest.raises(ConfigError) as exc:
            parse_config(config_file(data))
        assert exc.value.key == key

    def test_malformed_json(self, config_file):
        with pytest.raises(ConfigError):
            parse_config(config_file('{"fista": '))

    def test_root_must_be_object(self, config_file):
        with pytest.raises(ConfigError):
            parse_config(config_file([1, 2]))

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            parse_config(overrides={'flow.speed': '1'})


class TestEnvironment:
    def test_threads_from_env(self, monkeypatch):
        monkeypatch.setenv('DEFENCE_THREADS', '3')
        assert config.threads() == 3

    def test_threads_default(self, monkeypatch):
        monkeypatch.delenv('DEFENCE_THREADS', raising=False)
        assert config.threads() >= 1

    @pytest.mark.parametrize('raw', ['0', 'many'])
    def test_bad_threads(self, monkeypatch, raw):
        monkeypatch.setenv('DEFENCE_THREADS', raw)
        with pytest.raises(ConfigError):
            config.threads()

    def test_log_level(self, monkeypatch):
        monkeypatch.setenv('DEFENCE_LOG_LEVEL', 'debug')
        assert config.log_level() == 'DEBUG'
