"""Configuration helpers."""

import os

DEFAULT = 3


def load(path):
    return open(path).read()
