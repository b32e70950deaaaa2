"""Regenerate the bundled blob fixture manifest from its in-code definition."""

from pathlib import Path

from dragbench.manifest import FIXTURE_FILE, build_fixture_suite, write_manifest

if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "dragbench" / "data" / FIXTURE_FILE
    cases = build_fixture_suite()
    for c in cases:
        c.validate()
    write_manifest(out, cases)
    print(f"wrote {len(cases)} cases to {out}")
