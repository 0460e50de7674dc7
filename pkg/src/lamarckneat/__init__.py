"""Co-evolution of CNN blueprints and modules with inherited, trained output layers."""

__version__ = "0.1.0"
