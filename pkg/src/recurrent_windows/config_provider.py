"""Configuration provider abstraction for dependency injection.

``RunConfig.from_provider`` reads through this interface, so run configs can
be built from a TOML file or from plain dicts in tests.
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional


class ConfigProvider(ABC):
    """Abstract base for configuration providers."""

    @abstractmethod
    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get a configuration value.

        Args:
            section: Config section (e.g., 'model', 'train'); "" for top-level keys
            key: Key within section
            default: Default value if not found

        Returns:
            Configuration value or default
        """

    @abstractmethod
    def get_section(self, section: str) -> Any:
        """Get an entire section (dict, or list of tables for ``eval``)."""


class TomlConfigProvider(ConfigProvider):
    """Provider backed by a TOML run file (see ``config.Config`` for lookup order)."""

    def __init__(self, config_path: Optional[Path] = None):
        from .config import Config

        self.config = Config(config_path=config_path)

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.config.get(section, key, default)

    def get_section(self, section: str) -> Any:
        return self.config.get_section(section)


class MockConfigProvider(ConfigProvider):
    """In-memory provider for tests.

    Args:
        data: ``{section: {key: value}}``; top-level keys live under ``""``
    """

    def __init__(self, data: Optional[Dict[str, Any]] = None):
        self.data = data or {}

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.data.get(section, {}).get(key, default)

    def get_section(self, section: str) -> Any:
        return self.data.get(section, {})
