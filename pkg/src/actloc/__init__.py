"""Activity classification and temporal localization over clip features."""

__version__ = "0.1.0"
