"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS = {}


def record(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} -- {detail}"
    RESULTS[number] = line
    print(line)
    return ok
