"""Paginated hourly kline download from a spot-market REST endpoint."""

from __future__ import annotations

import json
import logging
import time
from datetime import datetime
from typing import Callable

import requests

from .errors import HttpError, RateLimited
from .panel import HOUR, to_epoch

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://api.binance.com/api/v3/klines"
PAGE_LIMIT = 1000
ATTEMPTS = 3


def _retry_after(resp: requests.Response) -> float | None:
    value = resp.headers.get("Retry-After")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


def _get_page(session, endpoint: str, params: dict, sleep: Callable[[float], None], backoff: float) -> list:
    for attempt in range(ATTEMPTS):
        last = attempt == ATTEMPTS - 1
        try:
            resp = session.get(endpoint, params=params, timeout=30)
        except requests.ConnectionError as exc:
            if last:
                raise HttpError(0, str(exc)) from None
            sleep(backoff * 2**attempt)
            continue
        if resp.status_code in (418, 429):
            wait = _retry_after(resp)
            if last:
                raise RateLimited(resp.status_code, resp.text, wait)
            log.warning("rate limited on %s, waiting %s s", params.get("symbol"), wait)
            sleep(wait if wait is not None else backoff * 2**attempt)
            continue
        if resp.status_code >= 500 and not last:
            sleep(backoff * 2**attempt)
            continue
        if resp.status_code != 200:
            raise HttpError(resp.status_code, resp.text)
        try:
            payload = resp.json()
        except (ValueError, json.JSONDecodeError):
            raise HttpError(resp.status_code, resp.text) from None
        if not isinstance(payload, list):
            raise HttpError(resp.status_code, resp.text)
        return payload
    raise AssertionError("unreachable")


def fetch_klines(
    endpoint: str,
    symbol: str,
    start: datetime,
    end: datetime,
    interval: str = "1h",
    *,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
    backoff: float = 1.0,
) -> list[str]:
    """Download hourly klines in ``[start, end]`` as comma-delimited rows.

    Pages of at most 1000 rows are requested until the range is exhausted.
    Transient failures (connection errors, 5xx, 429/418) are retried up to
    three attempts with exponential backoff; Retry-After is honoured.
    """
    if interval != "1h":
        raise ValueError("only the 1h interval is supported")
    session = session or requests.Session()
    start_ms = to_epoch(start) * 1000
    end_ms = to_epoch(end) * 1000
    rows: list[str] = []
    last_open = None
    while start_ms <= end_ms:
        params = {
            "symbol": symbol,
            "interval": interval,
            "startTime": start_ms,
            "endTime": end_ms,
            "limit": PAGE_LIMIT,
        }
        page = _get_page(session, endpoint, params, sleep, backoff)
        if not page:
            break
        for rec in page:
            open_ms = int(rec[0])
            if last_open is not None and open_ms <= last_open:
                continue
            last_open = open_ms
            rows.append(",".join(str(x) for x in rec))
        start_ms = last_open + HOUR * 1000
        if len(page) < PAGE_LIMIT:
            break
    return rows
