"""gerscan: detect circular ger dwellings in map tiles and derive poverty statistics."""

__version__ = "0.1.0"
