"""Atomic file output and the CSV conventions shared by all reports."""
import csv
import io
import os
import tempfile

CSV_SCHEMA_VERSION = 1


def atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_value(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def csv_text(schema, header, rows):
    """CSV with a leading ``# schema: <name> v<N>`` comment line and a header row."""
    buf = io.StringIO()
    buf.write(f"# schema: {schema} v{CSV_SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, schema, header, rows):
    atomic_write_text(path, csv_text(schema, header, rows))


def read_csv(path):
    """Return ``(schema, header, rows)``; ``schema`` is the name from the comment line or None."""
    schema = None
    lines = []
    with open(path, newline="") as f:
        for line in f:
            if line.startswith("# schema: "):
                schema = line[len("# schema: "):].rsplit(" v", 1)[0]
            elif not line.startswith("#"):
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    return schema, header, list(reader)
