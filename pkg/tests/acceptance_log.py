"""One PASS/FAIL line per acceptance criterion, printed live and again in the terminal summary."""

RESULTS = []


def record(number, title, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    return ok
