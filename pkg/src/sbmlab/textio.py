"""Numeric text formatting shared by the file writers: shortest
round-trippable decimal, independent of numpy scalar types."""


def fnum(x) -> str:
    return repr(float(x))
