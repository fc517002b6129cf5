"""Validate jkolab output directories and input files against schemas/."""

import json
import pathlib
import sys

import jsonschema

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCHEMAS = ROOT / "schemas"

BY_NAME = {
    "manifest.json": "manifest",
    "structural.json": "structural",
    "diff_harnack.json": "diff_harnack",
    "recursion.json": "recursion",
    "harnack.json": "harnack",
    "residuals.json": "residuals",
    "convergence.json": "convergence",
    "ot_selftest.json": "ot_selftest",
    "ot_selftest_worst.json": "ot_selftest_worst",
}


def load_schema(name):
    with open(SCHEMAS / f"{name}.schema.json") as f:
        schema = json.load(f)
    jsonschema.Draft202012Validator.check_schema(schema)
    return jsonschema.Draft202012Validator(schema)


def schema_for(path):
    if path.parent.name == "densities":
        return "field_header"
    return BY_NAME.get(path.name)


def main(argv):
    validators = {}
    checked = 0
    failures = 0

    def check(path, name):
        nonlocal checked, failures
        if name not in validators:
            validators[name] = load_schema(name)
        with open(path) as f:
            doc = json.load(f)
        errors = list(validators[name].iter_errors(doc))
        checked += 1
        for e in errors[:3]:
            failures += 1
            print(f"FAIL  {path}: {'/'.join(map(str, e.path))}: {e.message}")

    for arg in argv:
        p = pathlib.Path(arg)
        if p.is_dir():
            for f in sorted(p.rglob("*.json")):
                name = schema_for(f)
                if name:
                    check(f, name)
        elif ":" in arg and not p.exists():
            file, name = arg.rsplit(":", 1)
            check(pathlib.Path(file), name)
        else:
            print(f"FAIL  {arg}: no such file or directory")
            failures += 1

    print(f"{checked} documents checked, {failures} schema errors")
    return 0 if failures == 0 and checked > 0 else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
