"""Error types and validation functions for datasets and run configurations."""

import math

META_KEYS = (
    "lat", "lon", "altitude_m", "gt_pixel_xy",
    "meters_per_pixel", "scale_bucket", "source",
)
VALID_SOURCES = frozenset({"synthetic", "ul14"})


class FPIError(Exception):
    """Base class for every error raised by fpi_locate."""

    exit_code = 1


class ConfigError(FPIError, ValueError):
    """Raised when a run configuration or a command line is invalid."""

    exit_code = 1


class DataError(FPIError):
    """Raised when a dataset is missing, malformed or inconsistent."""

    exit_code = 2


class NumericError(FPIError, ArithmeticError):
    """Raised when NaN or Inf shows up in the loss or the parameters."""

    exit_code = 3


class DimensionError(FPIError, ValueError):
    """Raised when tensor shapes do not agree."""


class GradientError(FPIError, RuntimeError):
    """Raised when the reverse pass is misused."""


class LabelError(FPIError, ValueError):
    """Raised when a label grid cannot supervise a heatmap."""


def _is_number(value) -> bool:
    return (
        isinstance(value, (int, float))
        and not isinstance(value, bool)
        and math.isfinite(value)
    )


def validate_meta(
    meta: dict,
    image_size: tuple[int, int] | None = None,
) -> list[str]:
    """Validate one ``meta.json`` document.  Returns a list of problems (empty = valid).

    *image_size* is the (width, height) of the search image the metadata
    describes; when given, the ground truth must fall inside it.
    """
    problems: list[str] = []
    if not isinstance(meta, dict):
        return ["metadata is not a JSON object"]

    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        problems.append(f"missing keys: {', '.join(missing)}")

    lat, lon = meta.get("lat"), meta.get("lon")
    if "lat" in meta and (not _is_number(lat) or abs(lat) > 90):
        problems.append(f"lat out of range: {lat!r}")
    if "lon" in meta and (not _is_number(lon) or abs(lon) > 180):
        problems.append(f"lon out of range: {lon!r}")

    if "altitude_m" in meta and not _is_number(meta["altitude_m"]):
        problems.append(f"altitude_m is not a number: {meta['altitude_m']!r}")

    mpp = meta.get("meters_per_pixel")
    if "meters_per_pixel" in meta and (not _is_number(mpp) or mpp <= 0):
        problems.append(f"meters_per_pixel must be > 0, got {mpp!r}")

    bucket = meta.get("scale_bucket")
    if "scale_bucket" in meta and (
        isinstance(bucket, bool) or not isinstance(bucket, int) or bucket <= 0
    ):
        problems.append(f"scale_bucket must be a positive integer, got {bucket!r}")

    if "source" in meta and meta["source"] not in VALID_SOURCES:
        problems.append(f"unknown source {meta['source']!r}")

    gt = meta.get("gt_pixel_xy")
    if "gt_pixel_xy" in meta:
        if (
            not isinstance(gt, list)
            or len(gt) != 2
            or not all(_is_number(v) for v in gt)
        ):
            problems.append(f"gt_pixel_xy must be [x, y], got {gt!r}")
        elif image_size is not None:
            w, h = image_size
            if not (0 <= gt[0] < w and 0 <= gt[1] < h):
                problems.append(
                    f"gt_pixel_xy {gt} outside image of size {w}x{h}"
                )

    searches = meta.get("searches")
    if searches is not None:
        if not isinstance(searches, dict) or not searches:
            problems.append("searches must be a non-empty object")
        else:
            for scale, entry in searches.items():
                if not str(scale).isdigit():
                    problems.append(f"search scale {scale!r} is not an integer")
                if not isinstance(entry, dict):
                    problems.append(f"search entry {scale} is not an object")
                    continue
                sub = {k: v for k, v in meta.items() if k != "searches"}
                sub.update(entry)
                sub["scale_bucket"] = int(scale) if str(scale).isdigit() else scale
                for p in validate_meta(sub, image_size):
                    problems.append(f"search {scale}: {p}")

    return problems


def validate_run_config(doc: dict, known: dict[str, frozenset[str]]) -> list[str]:
    """Validate a run-configuration document against the known sections.

    *known* maps section names to the field names they accept.  Scalar
    top-level keys (``preset``, ``seed``) are listed under the ``""`` section.
    """
    problems: list[str] = []
    if not isinstance(doc, dict):
        return ["configuration is not a JSON object"]

    top = known.get("", frozenset())
    for key, value in doc.items():
        if key in top:
            continue
        if key not in known:
            problems.append(f"unknown section '{key}'")
            continue
        if not isinstance(value, dict):
            problems.append(f"section '{key}' must be an object")
            continue
        unknown = sorted(set(value) - known[key])
        if unknown:
            problems.append(f"unknown field(s) in '{key}': {', '.join(unknown)}")
    return problems
