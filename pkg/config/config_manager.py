# config/config_manager.py
import os
import re
import yaml
from typing import Dict, Any, Optional
from dotenv import load_dotenv

DEFAULT_CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))

_ENV_PATTERN = re.compile(r'\$\{([^}]+)\}')


class ConfigManager:
    """Manages configuration loading and access for DuetGen"""

    def __init__(self, config_dir: Optional[str] = None):
        self.config_dir = config_dir or DEFAULT_CONFIG_DIR
        load_dotenv()  # Load environment variables

        # Load configuration files
        self.system_config = self._load_yaml("system.yaml")
        self.models_config = self._load_yaml("models.yaml")

        # Validate configuration
        self._validate_config()

    def _load_yaml(self, filename: str) -> Dict[str, Any]:
        """Load YAML configuration file with environment variable substitution"""
        filepath = os.path.join(self.config_dir, filename)

        if not os.path.exists(filepath):
            raise FileNotFoundError(f"Configuration file not found: {filepath}")

        with open(filepath, 'r', encoding='utf-8') as file:
            content = file.read()

        content = self._substitute_env_vars(content)
        config = yaml.safe_load(content)

        if config is None:
            raise ValueError(f"Invalid YAML in configuration file: {filepath}")

        return config

    @staticmethod
    def _substitute_env_vars(content: str) -> str:
        """Substitute environment variables in configuration content"""
        def replace_env_var(match):
            var_name = match.group(1)
            return os.getenv(var_name, match.group(0))

        # Replace ${VAR_NAME} patterns with environment variable values
        return _ENV_PATTERN.sub(replace_env_var, content)

    def _validate_config(self):
        """Validate configuration structure and required fields"""
        required_feature_fields = ['sample_rate', 'hop_length', 'n_mels', 'pose_channels']
        required_synthesis_fields = ['speech_steps', 'motion_steps', 'temperature']
        required_model_components = ['encoder', 'acoustic_decoder', 'prenet', 'gesture_decoder', 'diffusion']

        features = self.system_config.get('features', {})
        for field in required_feature_fields:
            if field not in features:
                raise ValueError(f"Missing required features configuration field: {field}")

        synthesis = self.system_config.get('synthesis', {})
        for field in required_synthesis_fields:
            if field not in synthesis:
                raise ValueError(f"Missing required synthesis configuration field: {field}")

        models = self.models_config.get('models', {})
        if not models:
            raise ValueError("No models configured")

        for component in required_model_components:
            if component not in models:
                raise ValueError(f"Missing model configuration for component '{component}'")

        if not self.models_config.get('training'):
            raise ValueError("No training profiles configured")

    @staticmethod
    def is_unset(value: Any) -> bool:
        """True for empty values and ${VAR} placeholders left unresolved"""
        return value is None or value == '' or (isinstance(value, str) and bool(_ENV_PATTERN.fullmatch(value)))

    def get_system_config(self, key: Optional[str] = None, default: Any = None) -> Any:
        """Get system configuration value"""
        return self._section(self.system_config, 'system', key, default)

    def get_feature_config(self, key: Optional[str] = None, default: Any = None) -> Any:
        """Get feature extraction configuration value"""
        return self._section(self.system_config, 'features', key, default)

    def get_synthesis_config(self, key: Optional[str] = None, default: Any = None) -> Any:
        """Get synthesis default configuration value"""
        return self._section(self.system_config, 'synthesis', key, default)

    def get_evaluation_config(self, key: Optional[str] = None, default: Any = None) -> Any:
        """Get evaluation configuration value"""
        return self._section(self.system_config, 'evaluation', key, default)

    def get_service_config(self, key: Optional[str] = None, default: Any = None) -> Any:
        """Get HTTP service configuration value"""
        return self._section(self.system_config, 'service', key, default)

    def get_logging_config(self, key: Optional[str] = None, default: Any = None) -> Any:
        """Get logging configuration value"""
        return self._section(self.system_config, 'logging', key, default)

    def get_model_config(self, component: str) -> Dict[str, Any]:
        """Get architecture configuration for a model component"""
        models = self.models_config.get('models', {})

        if component not in models:
            raise ValueError(f"Model component '{component}' not found in configuration")

        return dict(models[component])

    def get_model_configs(self) -> Dict[str, Dict[str, Any]]:
        """Get all model component configurations"""
        return {name: dict(section) for name, section in self.models_config.get('models', {}).items()}

    def get_training_config(self, profile: str = 'desk') -> Dict[str, Any]:
        """Get a training profile"""
        profiles = self.models_config.get('training', {})

        if profile not in profiles:
            raise ValueError(f"Training profile '{profile}' not found in configuration")

        return dict(profiles[profile])

    def get_all_config(self) -> Dict[str, Any]:
        """Get all configuration"""
        return {
            'system': self.get_system_config(),
            'features': self.get_feature_config(),
            'synthesis': self.get_synthesis_config(),
            'evaluation': self.get_evaluation_config(),
            'service': self.get_service_config(),
            'logging': self.get_logging_config(),
            'models': self.get_model_configs(),
            'training': dict(self.models_config.get('training', {})),
        }

    @staticmethod
    def _section(config: Dict[str, Any], name: str, key: Optional[str], default: Any) -> Any:
        section = config.get(name, {}) or {}

        if key is None:
            return dict(section)

        return section.get(key, default)


def load_override_file(path: str) -> Dict[str, Any]:
    """Load a per-run YAML override document (one section per module)"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Configuration file not found: {path}")

    with open(path, 'r', encoding='utf-8') as file:
        content = ConfigManager._substitute_env_vars(file.read())

    config = yaml.safe_load(content) or {}
    if not isinstance(config, dict):
        raise ValueError(f"Configuration file must contain a mapping of sections: {path}")
    return config
