"""
YAML loader for revlm config files.

The loader keeps mapping order and understands the ``!template`` tag, whose
``$NAME`` placeholders are filled in by :func:`resolve_templates`.
"""
from collections import OrderedDict
from string import Template

import yaml


class Loader(yaml.SafeLoader):
    pass


def _dict_constructor(loader, node):
    return OrderedDict(loader.construct_pairs(node))


def _template_constructor(loader, node):
    return Template(loader.construct_scalar(node))


Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _dict_constructor)
Loader.add_constructor('!template', _template_constructor)


def load(stream):
    """Wrapper for yaml load function with custom loader."""
    return yaml.load(stream, Loader=Loader)


def resolve_templates(data, mapping):
    """
    Iterate recursively over data and replace every Template by its
    substitution with mapping. Raises KeyError for unknown placeholders.
    """
    if isinstance(data, list):
        items = list(enumerate(data))
    elif isinstance(data, dict):
        items = list(data.items())
    else:
        return
    for k, val in items:
        if isinstance(val, Template):
            try:
                data[k] = val.substitute(mapping)
            except ValueError as error:
                raise ValueError(f"Invalid template string '{val.template}'") from error
        elif isinstance(val, (list, dict)):
            resolve_templates(val, mapping)
