"""Configuration, scenario execution, output writers and the invariant suite."""
