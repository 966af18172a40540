from typing import Dict, Type

# resource type -> model class, filled as model classes are declared
registry: Dict[str, Type] = {}


class ResourceModelBase(type):
    def __new__(cls, name, bases, attrs, **kwargs):
        parents = [b for b in bases if isinstance(b, ResourceModelBase)]
        if not parents:
            return super().__new__(cls, name, bases, attrs, **kwargs)
        meta = attrs.pop("Meta", None)
        resource_type = getattr(meta, "resource_type", None)
        if not resource_type:
            raise TypeError(f"{name}.Meta must declare a resource_type")

        fields = {}
        for parent in parents:
            fields.update(getattr(getattr(parent, "_meta", None), "fields", {}))
        declared = {key: obj for key, obj in attrs.items() if hasattr(obj, "contribute_to_class")}
        plain = {key: obj for key, obj in attrs.items() if key not in declared}

        new_class = super().__new__(cls, name, bases, plain, **kwargs)
        new_class._meta = meta
        meta.model = new_class
        meta.fields = fields
        for key, obj in declared.items():
            fields[key] = obj.contribute_to_class(new_class, key)

        label = f"{new_class.__module__}.{new_class.__qualname__}"
        existing = registry.get(resource_type)
        if existing is not None and f"{existing.__module__}.{existing.__qualname__}" != label:
            raise TypeError(f'Resource type "{resource_type}" already bound to {existing.__name__}')
        registry[resource_type] = new_class
        return new_class
