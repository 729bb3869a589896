"""Request traces: JSON-lines I/O and synthetic generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .core import ConfigError, DEFAULT_MAX_SEQ_LEN, ModelConfig, Request

TRACE_FIELDS = ("id", "arrival_s", "prompt_tokens", "output_tokens", "predicted_bucket")


class TraceError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TraceRecord:
    id: int
    arrival_s: float
    prompt_tokens: int
    output_tokens: int
    predicted_bucket: Optional[int] = None

    def to_request(self) -> Request:
        return Request(self.id, self.arrival_s, self.prompt_tokens, self.output_tokens)

    def to_json(self) -> str:
        doc = {"id": self.id, "arrival_s": self.arrival_s,
               "prompt_tokens": self.prompt_tokens, "output_tokens": self.output_tokens}
        if self.predicted_bucket is not None:
            doc["predicted_bucket"] = self.predicted_bucket
        return json.dumps(doc)


def _int_field(doc: dict, key: str, line: int) -> int:
    value = doc.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceError(f"field {key!r} must be an integer, got {value!r}", line)
    return value


def parse_record(text: str, line: int = 0, model: Optional[ModelConfig] = None) -> TraceRecord:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceError(f"not a JSON object ({exc.msg})", line) from None
    if not isinstance(doc, dict):
        raise TraceError("record must be a JSON object", line)
    unknown = set(doc) - set(TRACE_FIELDS)
    if unknown:
        raise TraceError(f"unknown fields {sorted(unknown)}", line)
    arrival = doc.get("arrival_s")
    if isinstance(arrival, bool) or not isinstance(arrival, (int, float)) or not math.isfinite(arrival):
        raise TraceError(f"field 'arrival_s' must be a finite number, got {arrival!r}", line)
    bucket = doc.get("predicted_bucket")
    if bucket is not None:
        bucket = _int_field(doc, "predicted_bucket", line)
    rec = TraceRecord(
        id=_int_field(doc, "id", line),
        arrival_s=float(arrival),
        prompt_tokens=_int_field(doc, "prompt_tokens", line),
        output_tokens=_int_field(doc, "output_tokens", line),
        predicted_bucket=bucket,
    )
    if model is not None:
        try:
            rec.to_request().validate(model)
        except ConfigError as exc:
            raise TraceError(str(exc), line) from None
    return rec


def read_trace(path: str, model: Optional[ModelConfig] = None) -> List[TraceRecord]:
    """Read a trace file; blank lines and ``#`` comments are skipped."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            text = text.strip()
            if not text or text.startswith("#"):
                continue
            rec = parse_record(text, lineno, model)
            if rec.id in seen:
                raise TraceError(f"duplicate id {rec.id}", lineno)
            seen.add(rec.id)
            records.append(rec)
    return records


def write_trace(path: str, records: Iterable[TraceRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def to_requests(records: Iterable[TraceRecord]) -> Tuple[List[Request], Dict[int, int]]:
    """Requests sorted by arrival (stable), plus any trace-provided buckets."""
    records = sorted(records, key=lambda r: r.arrival_s)
    buckets = {r.id: r.predicted_bucket for r in records if r.predicted_bucket is not None}
    return [r.to_request() for r in records], buckets


# -- generation ---------------------------------------------------------------

@dataclass(frozen=True)
class LengthDist:
    kind: str
    params: Tuple[float, ...]

    @classmethod
    def parse(cls, text: str) -> "LengthDist":
        """``fixed:L``, ``uniform:A,B``, ``lognormal:MU,SIGMA`` or ``lognormal-mean:MEAN,SIGMA``."""
        kind, _, rest = text.partition(":")
        try:
            params = tuple(float(x) for x in rest.split(",")) if rest else ()
        except ValueError:
            raise ConfigError(f"bad distribution parameters in {text!r}") from None
        dist = cls(kind, params)
        dist.validate()
        return dist

    def validate(self, max_len: Optional[int] = None) -> None:
        k, p = self.kind, self.params
        arity = {"fixed": 1, "uniform": 2, "lognormal": 2, "lognormal-mean": 2}
        if k not in arity:
            raise ConfigError(f"unknown distribution {k!r}")
        if len(p) != arity[k]:
            raise ConfigError(f"{k} takes {arity[k]} parameter(s), got {len(p)}")
        if k == "fixed" and p[0] < 0:
            raise ConfigError("fixed length must be >= 0")
        if k == "uniform" and not 0 <= p[0] <= p[1]:
            raise ConfigError("uniform needs 0 <= a <= b")
        if k.startswith("lognormal") and p[1] <= 0:
            raise ConfigError("lognormal sigma must be > 0")
        if k == "lognormal-mean" and p[0] <= 0:
            raise ConfigError("lognormal mean must be > 0")
        if max_len is not None and k in ("fixed", "uniform") and p[-1] > max_len:
            raise ConfigError(f"{k} upper bound {p[-1]:g} exceeds {max_len}")

    def sample(self, rng: np.random.Generator, n: int, lo: int, hi: int) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "fixed":
            x = np.full(n, p[0])
        elif k == "uniform":
            x = rng.integers(int(p[0]), int(p[1]), endpoint=True, size=n)
        else:
            mu, sigma = p
            if k == "lognormal-mean":
                mu = math.log(p[0]) - sigma * sigma / 2.0
            x = rng.lognormal(mu, sigma, size=n)
        return np.clip(np.rint(x), lo, hi).astype(np.int64)


def generate_trace(count: int, output: LengthDist, seed: int = 0,
                   prompt: LengthDist = LengthDist("fixed", (0.0,)),
                   arrival: str = "offline", max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> List[TraceRecord]:
    """Draw ``count`` requests. ``arrival`` is ``offline`` or ``poisson:RATE``."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    output.validate(max_seq_len)
    prompt.validate(max_seq_len - 1)
    rng = np.random.default_rng(seed)
    prompts = prompt.sample(rng, count, 0, max_seq_len - 1)
    outputs = output.sample(rng, count, 1, max_seq_len)
    outputs = np.minimum(outputs, max_seq_len - prompts)

    kind, _, rest = arrival.partition(":")
    if kind == "offline":
        arrivals = np.zeros(count)
    elif kind == "poisson":
        try:
            rate = float(rest)
        except ValueError:
            raise ConfigError(f"bad poisson rate in {arrival!r}") from None
        if rate <= 0:
            raise ConfigError("poisson rate must be > 0")
        arrivals = np.cumsum(rng.exponential(1.0 / rate, size=count))
    else:
        raise ConfigError(f"unknown arrival pattern {arrival!r}")

    return [TraceRecord(i, float(arrivals[i]), int(prompts[i]), int(outputs[i]))
            for i in range(count)]
