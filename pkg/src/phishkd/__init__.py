"""Phishing email detection with compact recurrent students distilled from a transformer teacher."""
from phishkd.exceptions import ContractError, CorpusError, DimensionError, NumericError, ParameterError, PhishKDError

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "CorpusError",
    "DimensionError",
    "NumericError",
    "ParameterError",
    "PhishKDError",
    "__version__",
]
