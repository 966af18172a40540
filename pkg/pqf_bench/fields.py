import json
import math
import typing
from datetime import datetime
from typing import Any, Optional, Type

import numpy as np
from dateutil.parser import parse

from pqf_bench.conf import settings

if typing.TYPE_CHECKING:
    from pqf_bench.models import ResourceModel


def is_identifier(value):
    return isinstance(value, dict) and "id" in value and "type" in value


def get_identifier(value):
    from pqf_bench.models import ResourceModel

    if is_identifier(value):
        return {"id": str(value["id"]), "type": value["type"]}
    if isinstance(value, ResourceModel):
        return {"id": str(value.id), "type": value._meta.resource_type}
    return None


def get_model(resource_type: str) -> Optional[Type["ResourceModel"]]:
    from pqf_bench.base import registry

    return registry.get(resource_type)


def round_float(value: float) -> Optional[float]:
    if not math.isfinite(value):
        return None
    if value == 0:
        return 0.0
    return float(f"{value:.{settings.float_digits}g}")


def to_primitive(value: Any) -> Any:
    """Convert numpy containers and scalars to canonical JSON values."""
    if isinstance(value, dict):
        return {str(key): to_primitive(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_primitive(val) for val in value]
    if isinstance(value, np.ndarray):
        return to_primitive(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return round_float(float(value))
    if isinstance(value, datetime):
        return value.isoformat()
    return value


def canonical_dumps(value: Any) -> str:
    """Sorted keys, two-space indent, rounded floats: identical inputs give identical bytes."""
    return json.dumps(to_primitive(value), sort_keys=True, indent=2, allow_nan=False) + "\n"


class AttributeDescriptor:
    def __init__(self, field):
        self.field = field

    def __get__(self, obj, obj_type=None):
        if obj is None:
            return self
        return obj.__dict__.get(self.field.name)

    def __set__(self, obj, value):
        obj.__dict__[self.field.name] = value


class RelationshipDescriptor:
    def __init__(self, field):
        self.field = field

    def __get__(self, obj, obj_type=None):
        if obj is None:
            return self
        value = obj.__dict__.get(self.field.name)
        if value is None and self.field.many:
            return []
        return value

    def __set__(self, obj, value):
        if self.field.many:
            obj.__dict__[self.field.name] = list(value or [])
        else:
            obj.__dict__[self.field.name] = value


class Attribute:
    def __init__(self, name=None, model=None):
        self.name = name
        self.model = model

    def contribute_to_class(self, model, name):
        self.name = self.name or name
        self.model = model
        setattr(model, name, AttributeDescriptor(self))
        return self

    def clean(self, value):
        if isinstance(value, dict):
            return dict((str(attr), self.clean(val)) for attr, val in value.items())
        return value

    def dump(self, value):
        return to_primitive(value)


class FloatAttribute(Attribute):
    def clean(self, value):
        return float(value) if value is not None else None

    def dump(self, value):
        return round_float(float(value)) if value is not None else None


class DateTimeAttribute(Attribute):
    def clean(self, value):
        return parse(value) if isinstance(value, str) else None

    def dump(self, value):
        return value.isoformat() if isinstance(value, datetime) else None


class Relationship(Attribute):
    def __init__(self, many=False, **kwargs):
        super().__init__(**kwargs)
        self.many = many

    def contribute_to_class(self, model, name):
        super().contribute_to_class(model, name)
        setattr(model, name, RelationshipDescriptor(self))
        return self

    def clean(self, value):
        if self.many and value is not None:
            return list(filter(bool, map(get_identifier, value)))
        if value:
            if isinstance(value, list):
                value = value[0]
            return get_identifier(value)
        return None

    def dump(self, value):
        return {"data": self.clean(value)}
