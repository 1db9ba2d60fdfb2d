"""Parse raw feed records and clean one five-second window.

Feeds arrive as 17-field CSV rows.  This walks three rows — one canonical,
one with gaps, one malformed — through classification, then runs a small
window through the cleaner to show what each rule removes.
"""

from datetime import datetime, timedelta, timezone

from tritide import (
    MISSING,
    EdgeCleaner,
    MalformedRecord,
    assign_windows,
    haversine_m,
    serialize_tuple,
)
from tritide.feedcore import classify_record

BASE = datetime(2017, 2, 14, 6, 0, 0, tzinfo=timezone.utc)


def record(trip, ts, lat="46.0878", lng="-64.7782"):
    return [
        "120", "7", "Route 51", "51", "PLAZA BLVD", "5283", "31",
        str(trip), "06:00:00", "06:45:00",
        "1878", "506810", "1878", "En Route",
        lat, lng, ts.isoformat(),
    ]


def main():
    print("=== classification ===")
    good = classify_record(record(1001, BASE))
    print(f"trip {good.trip_key} at {good.timestamp} -> {good.point}")

    gappy = classify_record(record("N/A", BASE + timedelta(seconds=5)))
    print(f"an N/A trip id parses to the missing sentinel: {gappy.trip_key!r}")
    print(f"the sentinel is falsy and singular: {gappy.trip_key is MISSING}")

    short = classify_record(["only", "three", "fields"])
    assert isinstance(short, MalformedRecord)
    print(f"a 3-field row becomes {type(short).__name__} ({short.reason})")

    bad_coord = classify_record(record(1001, BASE, lat="not-a-number"))
    assert isinstance(bad_coord, MalformedRecord)
    print(f"a broken coordinate too ({bad_coord.reason}),")
    print(f"  but its timestamp is still recoverable: {bad_coord.timestamp_guess()}")

    a = classify_record(record(1001, BASE, lng="-64.7782")).point
    b = classify_record(record(1001, BASE, lng="-64.7776")).point
    print(f"haversine check: {haversine_m(a, b):.1f} m between the two fixes")
    print(f"serialize round trip: {serialize_tuple(good) == record(1001, BASE)}")

    print()
    print("=== cleaning one stream ===")
    stream = [
        classify_record(record(1001, BASE)),
        classify_record(record(1001, BASE)),                        # exact duplicate
        classify_record(record(1001, BASE + timedelta(seconds=5), lat="bad")),
        classify_record(["only", "three", "fields"]),               # unrepairable
        classify_record(record(1001, BASE + timedelta(seconds=10))),
    ]
    cleaner = EdgeCleaner(["Route 51"], period_s=5)
    for window in assign_windows(stream):
        survivors, report = cleaner.clean(window)
        print(f"window {window.window_start:%H:%M:%S}: {len(survivors)} tuple(s) kept")
        for key, value in report.as_dict().items():
            if value:
                print(f"  {key}: {value}")
        print(f"  balanced: {report.balanced()}")


if __name__ == "__main__":
    main()
