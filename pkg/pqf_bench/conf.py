from contextlib import ContextDecorator
from typing import Any, Dict

from pydantic import BaseModel, ConfigDict, Field, PositiveInt


class Settings(BaseModel):
    """Process-wide numerical tolerances and budgets.

    Read attributes at call time (``settings.unitarity_tolerance``) so that
    :func:`override_settings` takes effect everywhere.
    """

    model_config = ConfigDict(validate_assignment=True, extra="forbid")

    unitarity_tolerance: float = Field(1e-10, gt=0)
    routing_tolerance: float = Field(1e-12, gt=0)
    # Largest multiset count C(m+k-1, k) sampled by full enumeration.
    enumeration_limit: PositiveInt = 2_000_000
    enumeration_chunk: PositiveInt = 32_768
    # Brute-force guard of exact_noisy_distribution: C(m, n-l) * 2^(n-l) * C(n, l).
    oracle_budget: PositiveInt = 5_000_000
    sample_block_size: PositiveInt = 2_048
    bootstrap_resamples: PositiveInt = 200
    inconclusive_sigma: float = Field(2.0, ge=0)
    min_sector_records: PositiveInt = 2
    # A sector is tested only when every unitary has enough records to resolve its
    # correlators to sector_precision times their scale (Chebyshev, sector_confidence).
    sector_precision: float = Field(0.5, gt=0)
    sector_confidence: float = Field(0.5, ge=0, lt=1)
    # Above this n the closed-form references replace the exact oracle.
    reference_cutoff_n: PositiveInt = 12
    float_digits: int = Field(12, ge=1, le=17)


settings = Settings()


class override_settings(ContextDecorator):
    def __init__(self, **values: Any) -> None:
        self.values = values
        self._saved: Dict[str, Any] = {}

    def __enter__(self) -> Settings:
        try:
            for name, value in self.values.items():
                if name not in Settings.model_fields:
                    raise AttributeError(f'Unknown setting "{name}"')
                saved = getattr(settings, name)
                setattr(settings, name, value)
                self._saved[name] = saved
        except Exception:
            self.__exit__(None, None, None)
            raise
        return settings

    def __exit__(self, *exc_info) -> bool:
        for name, value in self._saved.items():
            setattr(settings, name, value)
        self._saved = {}
        return False
