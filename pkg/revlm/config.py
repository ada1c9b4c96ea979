"""Config convenience class

This class encapsulates access to a YAML run configuration file.

"""
import os

import attr
from yaml import YAMLError

from .exceptions import InvalidConfigError, NoConfigFoundError
from .util.yaml import load, resolve_templates

SECTIONS = ('model', 'optim', 'run', 'retrofit')


@attr.s(eq=False)
class Config:
    filename = attr.ib(validator=attr.validators.instance_of(str))

    def __attrs_post_init__(self):
        self.base = os.path.dirname(os.path.abspath(self.filename))
        try:
            with open(self.filename) as file:
                self.data = load(file)
        except FileNotFoundError:
            raise NoConfigFoundError(
                f"configuration file '{self.filename}' could not be found"
            )
        except YAMLError as err:
            raise InvalidConfigError(f"Error in configuration file: {err}")
        if self.data is None:
            self.data = {}
        if not isinstance(self.data, dict):
            raise InvalidConfigError(
                f"configuration file '{self.filename}' must contain a mapping"
            )

        substitutions = {
            'BASE': self.base,
        }
        # only REVLM_* variables are visible to !template
        for x in os.environ.keys():
            if x.startswith("REVLM_"):
                substitutions[x] = os.environ[x]

        try:
            resolve_templates(self.data, substitutions)
        except KeyError as e:
            raise InvalidConfigError(
                f"configuration file '{self.filename}' refers to unknown variable '{e.args[0]}'"
            )
        except ValueError as e:
            raise InvalidConfigError(
                f"configuration file '{self.filename}' is invalid: {e}"
            )

    def resolve_path(self, path):
        """Resolve a path relative to the directory of the configuration file

        Args:
            path (str): path to resolve

        Returns:
            str: the absolute path
        """
        path = os.path.expanduser(path)
        path = os.path.expandvars(path)
        if os.path.isabs(path):
            return path

        return os.path.join(self.base, path)

    def options(self):
        """Flattens the configuration sections into a single option mapping

        Returns:
            dict: option name to value, paths in the run section resolved

        Raises:
            InvalidConfigError: on unknown sections or options defined twice
        """
        options = {}
        for section, values in self.data.items():
            if section not in SECTIONS:
                raise InvalidConfigError(
                    f"unknown section '{section}' in '{self.filename}' (use {', '.join(SECTIONS)})"
                )
            if values is None:
                continue
            if not isinstance(values, dict):
                raise InvalidConfigError(f"section '{section}' must be a mapping")
            for key, value in values.items():
                if key in options:
                    raise InvalidConfigError(f"option '{key}' is set in more than one section")
                if section == 'run' and key in ('data', 'out') and value is not None:
                    value = self.resolve_path(str(value))
                options[key] = value
        return options
