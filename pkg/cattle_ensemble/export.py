"""
Writing JSON and CSV outputs atomically.
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from os import PathLike
from pathlib import Path
from typing import Any, Iterable, Sequence, Union


def write_atomic(data: Union[str, bytes], outfile: PathLike) -> None:
    """Write a file through a temporary file and a rename, so readers
    never see a partial output."""
    outfile = Path(outfile)
    outfile.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmpname = tempfile.mkstemp(dir=outfile.parent, prefix=f".{outfile.name}.")
    try:
        with os.fdopen(fd, "wb") as outfh:
            outfh.write(payload)
        os.replace(tmpname, outfile)
    except BaseException:
        os.unlink(tmpname)
        raise


def write_json(data: Any, outfile: PathLike) -> None:
    text = json.dumps(data, indent=2, ensure_ascii=False)
    write_atomic(text + "\n", outfile)


def write_csv(
    outfile: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    write_atomic(buf.getvalue(), outfile)


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as infh:
        while True:
            chunk = infh.read(65536)
            if len(chunk) == 0:
                break
            digest.update(chunk)
    return digest.hexdigest()


def fmt(value: float) -> str:
    """Fractions are reported with six decimal places."""
    return "%.6f" % value
