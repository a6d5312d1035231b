"""Process-level configuration management for racestack"""

import os
import configparser
from pathlib import Path
from dotenv import load_dotenv

from .errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Base configuration class

    Scenario documents (vehicles, planners, maps) live in JSON and are handled by
    racestack.scenario; this class only covers settings of the running process.
    """

    def __init__(self, path=None):
        self.config = configparser.ConfigParser()
        self.source = None
        self.load_config(path)

    def load_config(self, path=None):
        """Load configuration from files"""
        config_path = path or os.environ.get('RACESTACK_CONFIG_PATH')

        if config_path and os.path.exists(config_path):
            self.config.read(config_path)
            self.source = str(config_path)
        else:
            # Default path: config.ini next to the package
            project_root = Path(__file__).resolve().parent.parent
            dev_config = project_root / 'config.ini'
            if dev_config.exists():
                self.config.read(dev_config)
                self.source = str(dev_config)
            # No file: built-in defaults apply

    def get(self, section, key, fallback=None):
        """Get configuration value with environment variable substitution"""
        value = self.config.get(section, key, fallback=fallback)
        if value and isinstance(value, str) and value.startswith('${') and value.endswith('}'):
            env_var = value[2:-1]  # Remove ${ and }
            return os.getenv(env_var, fallback)
        return value

    def getint(self, section, key, fallback=None):
        """Get integer configuration value"""
        return self.config.getint(section, key, fallback=fallback)

    def getboolean(self, section, key, fallback=None):
        """Get boolean configuration value"""
        return self.config.getboolean(section, key, fallback=fallback)

    def getfloat(self, section, key, fallback=None):
        """Get float configuration value"""
        return self.config.getfloat(section, key, fallback=fallback)

    # Logging
    @property
    def log_level(self):
        return (os.getenv('RACESTACK_LOG_LEVEL') or self.get('Logging', 'level', 'INFO')).upper()

    @property
    def log_file(self):
        """Log file path, or None to log to stdout only"""
        return os.getenv('RACESTACK_LOG_FILE') or self.get('Logging', 'file', None)

    # Output
    @property
    def output_dir(self):
        return os.getenv('RACESTACK_OUTPUT_DIR') or self.get('Output', 'directory', 'runs')

    # V2V
    @property
    def v2v_host(self):
        return os.getenv('RACESTACK_V2V_HOST') or self.get('V2V', 'host', '127.0.0.1')

    @property
    def v2v_port(self):
        env_port = os.getenv('RACESTACK_V2V_PORT')
        if env_port:
            return int(env_port)
        return self.getint('V2V', 'port', 8765)

    @property
    def v2v_staleness_window(self):
        """Seconds after which a peer's latest message is ignored"""
        return self.getfloat('V2V', 'staleness_window', 0.5)

    @property
    def v2v_timeout(self):
        """Socket timeout for push/pull requests in seconds"""
        return self.getfloat('V2V', 'timeout', 0.2)

    # Compute
    @property
    def lattice_workers(self):
        return self.getint('Compute', 'lattice_workers', 4)

    @property
    def localization_workers(self):
        return self.getint('Compute', 'localization_workers', 1)

    # Map
    @property
    def default_resolution(self):
        """Map resolution used by the track generators (meters/cell)"""
        return self.getfloat('Map', 'default_resolution', 0.05)

    def as_dict(self):
        """Get the effective settings as a dictionary"""
        return {
            'log_level': self.log_level,
            'log_file': self.log_file,
            'output_dir': self.output_dir,
            'v2v_host': self.v2v_host,
            'v2v_port': self.v2v_port,
            'v2v_staleness_window': self.v2v_staleness_window,
            'v2v_timeout': self.v2v_timeout,
            'lattice_workers': self.lattice_workers,
            'localization_workers': self.localization_workers,
            'default_resolution': self.default_resolution,
        }

    def validate(self):
        """Validate settings, reporting every problem at once"""
        errors = []

        if self.log_level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"Logging.level must be a logging level name, got {self.log_level!r}")

        if not 0 <= self.v2v_port <= 65535:
            errors.append("V2V.port must be between 0 and 65535")

        if self.v2v_staleness_window <= 0:
            errors.append("V2V.staleness_window must be greater than 0")

        if self.v2v_timeout <= 0:
            errors.append("V2V.timeout must be greater than 0")

        if self.lattice_workers < 1:
            errors.append("Compute.lattice_workers must be at least 1")

        if self.localization_workers < 1:
            errors.append("Compute.localization_workers must be at least 1")

        if self.default_resolution <= 0:
            errors.append("Map.default_resolution must be greater than 0")

        if errors:
            raise ConfigError(errors)

        return True


# Global config instance
config = Config()
