from .atomic import atomic_replace
from .dict import diff_dict, unknown_keys
from .yaml import load
