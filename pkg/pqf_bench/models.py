from typing import Any, Dict, Iterator, List, Optional, Tuple, Type, TypeVar

from pqf_bench.base import ResourceModelBase
from pqf_bench.fields import Relationship, get_model, is_identifier

T = TypeVar("T", bound="ResourceModel")

Index = Dict[Tuple[str, str], Dict]


class ResourceError(Exception):
    pass


class ResourceModel(metaclass=ResourceModelBase):
    """A typed resource that round-trips through JSON:API documents."""

    def __init__(self: T, **kwargs: Any) -> None:
        self.pk = kwargs.pop("pk", None) or kwargs.pop("id", None)
        if self.pk is not None:
            self.pk = str(self.pk)
        for key, value in kwargs.items():
            if key not in self._meta.fields:
                raise TypeError(
                    f'{self.__class__.__name__} got an unexpected keyword argument "{key}"'
                )
            setattr(self, key, value)
        super().__init__()

    def __eq__(self: T, other: Any) -> bool:
        if self.__class__ != other.__class__:
            return False
        if self.pk is None:
            return self is other
        return self.pk == other.pk and self.to_resource() == other.to_resource()

    def __hash__(self) -> int:
        return hash((self.__class__.__name__, self.pk)) if self.pk else id(self)

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} {self.pk}>"

    @property
    def id(self: T) -> Optional[str]:
        return self.pk

    def _fields(self) -> Iterator[Tuple[str, Any]]:
        for name, field in self._meta.fields.items():
            yield name, field

    def to_resource(self: T) -> Dict:
        if self.pk is None:
            raise ResourceError(f"{self.__class__.__name__} without id cannot be serialized")
        attributes = {}
        relationships = {}
        for name, field in self._fields():
            if isinstance(field, Relationship):
                relationships[name] = field.dump(getattr(self, name))
            else:
                attributes[name] = field.dump(getattr(self, name))
        resource = {"type": self._meta.resource_type, "id": self.pk, "attributes": attributes}
        if relationships:
            resource["relationships"] = relationships
        return resource

    def related_resources(self: T) -> List["ResourceModel"]:
        related = []
        for name, field in self._fields():
            if not isinstance(field, Relationship):
                continue
            value = getattr(self, name)
            related.extend(value if field.many else [value] if value is not None else [])
        return related

    def to_document(self: T, meta: Optional[Dict] = None) -> Dict:
        included: Dict[Tuple[str, str], Dict] = {}
        pending = list(self.related_resources())
        while pending:
            record = pending.pop()
            key = (record._meta.resource_type, record.pk)
            if key in included:
                continue
            included[key] = record.to_resource()
            pending.extend(record.related_resources())
        included.pop((self._meta.resource_type, self.pk), None)
        document = {"data": self.to_resource()}
        if included:
            document["included"] = [included[key] for key in sorted(included)]
        if meta:
            document["meta"] = meta
        return document

    @staticmethod
    def from_resource(
        resource_dict: Dict, included: Optional[Index] = None, _seen: Optional[Dict] = None
    ) -> Optional[T]:
        cls = get_model(resource_dict.get("type"))
        if cls is None:
            return None
        return cls._from_resource(resource_dict, included or {}, {} if _seen is None else _seen)

    @classmethod
    def _from_resource(cls: Type[T], resource_dict: Dict, included: Index, seen: Dict) -> T:
        key = (resource_dict["type"], str(resource_dict["id"]))
        if key in seen:
            return seen[key]
        attributes = resource_dict.get("attributes") or {}
        relationships = resource_dict.get("relationships") or {}
        record = cls(id=resource_dict["id"])
        seen[key] = record
        for name, field in cls._meta.fields.items():
            if isinstance(field, Relationship):
                identifiers = field.clean((relationships.get(name) or {}).get("data"))
                setattr(record, name, cls._resolve(identifiers, included, seen))
            elif name in attributes:
                setattr(record, name, field.clean(attributes[name]))
        return record

    @staticmethod
    def _resolve(identifiers: Any, included: Index, seen: Dict) -> Any:
        if identifiers is None:
            return None
        if is_identifier(identifiers):
            key = (identifiers["type"], identifiers["id"])
            if key not in included:
                raise ResourceError(f"Resource {key[0]}/{key[1]} missing from included")
            return ResourceModel.from_resource(included[key], included, seen)
        return [ResourceModel._resolve(identifier, included, seen) for identifier in identifiers]

    @staticmethod
    def from_document(document: Dict) -> T:
        if not isinstance(document, dict) or not isinstance(document.get("data"), dict):
            raise ResourceError("Document has no primary data")
        included = {
            (resource["type"], str(resource["id"])): resource
            for resource in [document["data"], *(document.get("included") or [])]
        }
        record = ResourceModel.from_resource(document["data"], included)
        if record is None:
            raise ResourceError(f'Unknown resource type "{document["data"].get("type")}"')
        return record
