"""Closed garment category set with canonical ordering priorities."""

from enum import Enum


class GarmentCategory(Enum):
    UPPER = "upper"
    LOWER = "lower"
    DRESS = "dress"
    OUTER = "outer"

    @property
    def priority(self):
        return _PRIORITY[self]

    @classmethod
    def parse(cls, name):
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise ValueError(
                f"unknown garment category {name!r}; expected one of: {valid}"
            ) from None


_PRIORITY = {
    GarmentCategory.UPPER: 0,
    GarmentCategory.LOWER: 1,
    GarmentCategory.DRESS: 2,
    GarmentCategory.OUTER: 3,
}
