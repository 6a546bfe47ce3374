from packages.critheat_lab.settings import Settings, get_settings

__all__ = ["Settings", "get_settings"]
