"""Prompt rendering, LLM caption generation, summarization, and caption
stores.

Providers sit behind one interface with two implementations: a remote
HTTP completion client (API key via environment variable) and a
deterministic fixture provider that replays canned responses from disk.
All tests run on fixtures; the choice of remote model is configuration.

Caption store files are JSON Lines, one record per line. The review pass
writes keep/discard verdicts to a JSON Lines sidecar.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import CaptionError, ProviderError

logger = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"\{[a-z_]+\}")

DEFAULT_SUMMARY_WORD_BUDGET = 30


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    axis_name: str | None = None
    axis_values: tuple[str, ...] | None = None

    def __post_init__(self):
        if "{class}" not in self.body:
            raise CaptionError(f"template {self.template_id!r}: body lacks {{class}}")
        if self.axis_values is not None:
            object.__setattr__(self, "axis_values", tuple(self.axis_values))
            if "{axis}" not in self.body:
                raise CaptionError(
                    f"template {self.template_id!r}: axis values given but body lacks {{axis}}"
                )


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    label: str
    long_text: str
    short_text: str | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.long_text or not self.long_text.strip():
            raise CaptionError(f"caption {self.caption_id!r}: empty long_text")
        if self.short_text is not None:
            if not self.short_text.strip():
                raise CaptionError(f"caption {self.caption_id!r}: empty short_text")
            if len(self.short_text) >= len(self.long_text):
                raise CaptionError(
                    f"caption {self.caption_id!r}: short_text not shorter than long_text"
                )


@dataclass
class CaptionStore:
    dataset_name: str
    records: list[CaptionRecord] = field(default_factory=list)

    def by_label(self) -> dict[str, list[CaptionRecord]]:
        grouped: dict[str, list[CaptionRecord]] = {}
        for rec in self.records:
            grouped.setdefault(rec.label, []).append(rec)
        return grouped

    def by_id(self) -> dict[str, CaptionRecord]:
        return {r.caption_id: r for r in self.records}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"dataset_name": self.dataset_name}) + "\n")
            for rec in self.records:
                fh.write(
                    json.dumps(
                        {
                            "caption_id": rec.caption_id,
                            "label": rec.label,
                            "long_text": rec.long_text,
                            "short_text": rec.short_text,
                            "provenance": rec.provenance,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "CaptionStore":
        path = Path(path)
        lines = [ln for ln in path.read_text(encoding="utf-8").split("\n") if ln.strip()]
        if not lines:
            raise CaptionError(f"{path}: empty caption store")
        header = json.loads(lines[0])
        records = []
        for line in lines[1:]:
            obj = json.loads(line)
            records.append(
                CaptionRecord(
                    caption_id=obj["caption_id"],
                    label=obj["label"],
                    long_text=obj["long_text"],
                    short_text=obj.get("short_text"),
                    provenance=obj.get("provenance", {}),
                )
            )
        return cls(dataset_name=header["dataset_name"], records=records)


def render_prompts(template: PromptTemplate, class_name: str) -> list[str]:
    """Fill a template for one class: one prompt per axis value, or a
    single prompt when the template has no axis."""
    if not class_name:
        raise CaptionError("class_name must be non-empty")
    axis_values = template.axis_values if template.axis_values else (None,)
    prompts = []
    for axis_value in axis_values:
        text = template.body.replace("{class}", class_name)
        if axis_value is not None:
            text = text.replace("{axis}", axis_value)
        leftover = PLACEHOLDER.search(text)
        if leftover:
            raise CaptionError(
                f"template {template.template_id!r}: unresolved placeholder "
                f"{leftover.group(0)!r} after substitution"
            )
        prompts.append(text)
    return prompts


def request_hash(model_id: str, prompt: str, params: dict) -> str:
    payload = json.dumps(
        {"model_id": model_id, "prompt": prompt, "params": params}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class FixtureProvider:
    """Replays canned responses from a JSON fixture file.

    Fixture format::

        {
          "model_id": "fixture-v1",
          "generate": {"<prompt>": ["resp 1", "resp 2", ...]},
          "summarize": {"<long text or its sha256>": "short text"}
        }

    Pure and thread-safe; missing keys raise ProviderError.
    """

    def __init__(self, fixture: str | Path | dict):
        if isinstance(fixture, (str, Path)):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        self._generate = dict(fixture.get("generate", {}))
        self._summarize = dict(fixture.get("summarize", {}))
        self.model_id = fixture.get("model_id", "fixture")
        self.params: dict = {"provider": "fixture"}

    def complete(self, prompt: str, count: int) -> list[str]:
        if prompt not in self._generate:
            raise ProviderError(f"fixture has no responses for prompt {prompt!r}")
        responses = self._generate[prompt]
        if len(responses) < count:
            raise ProviderError(
                f"fixture has {len(responses)} responses for prompt {prompt!r}, need {count}"
            )
        return list(responses[:count])

    def summarize(self, long_text: str) -> str:
        if long_text in self._summarize:
            return self._summarize[long_text]
        digest = hashlib.sha256(long_text.encode("utf-8")).hexdigest()
        if digest in self._summarize:
            return self._summarize[digest]
        raise ProviderError("fixture has no summary for the given text")


class RemoteProvider:
    """HTTP completion client with bounded retries and backoff.

    Expects an OpenAI-style completions endpoint. The API key is read
    from the GIST_API_KEY environment variable unless passed explicitly.
    """

    SUMMARY_PROMPT = (
        "Summarize the following image description into a concise list of "
        "visual features, at most {budget} words:\n\n{text}"
    )

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        api_key: str | None = None,
        temperature: float = 0.7,
        top_p: float = 1.0,
        max_retries: int = 3,
        backoff_s: float = 1.0,
        session=None,
        summary_word_budget: int = DEFAULT_SUMMARY_WORD_BUDGET,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key = api_key if api_key is not None else os.environ.get("GIST_API_KEY", "")
        self.params = {"temperature": temperature, "top_p": top_p}
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.summary_word_budget = summary_word_budget
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _post(self, body: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.post(
                    self.endpoint,
                    json=body,
                    headers={"Authorization": f"Bearer {self.api_key}"},
                    timeout=60,
                )
                resp.raise_for_status()
                return resp.json()
            except Exception as exc:  # noqa: BLE001 - retried, then surfaced
                last_exc = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_s * (2**attempt))
        raise ProviderError(f"provider failed after {self.max_retries} attempts: {last_exc}")

    def complete(self, prompt: str, count: int) -> list[str]:
        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "n": count,
            **self.params,
        }
        data = self._post(body)
        try:
            return [choice["message"]["content"] for choice in data["choices"]]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {exc}") from exc

    def summarize(self, long_text: str) -> str:
        prompt = self.SUMMARY_PROMPT.format(budget=self.summary_word_budget, text=long_text)
        return self.complete(prompt, 1)[0]


class ResponseCache:
    """Raw-response cache keyed by request hash; one JSON file per entry."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def get(self, digest: str) -> list[str] | None:
        path = self.root / f"{digest}.json"
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))["responses"]
        except (json.JSONDecodeError, KeyError):
            logger.warning("response cache: corrupt entry %s treated as miss", digest)
            return None

    def put(self, digest: str, responses: list[str]) -> None:
        path = self.root / f"{digest}.json"
        if path.exists():
            return
        path.write_text(json.dumps({"responses": responses}), encoding="utf-8")


@dataclass
class SkipReport:
    skipped: list[dict] = field(default_factory=list)

    def add(self, prompt: str, reason: str) -> None:
        self.skipped.append({"prompt": prompt, "reason": reason})


def generate_class_captions(
    provider,
    class_name: str,
    prompts: Sequence[str],
    per_prompt: int,
    template: PromptTemplate | None = None,
    cache: ResponseCache | None = None,
    skip_report: SkipReport | None = None,
) -> list[CaptionRecord]:
    """Obtain per_prompt completions for each prompt and wrap them as
    caption records with provenance.

    When a template is given, axis values are attributed to prompts by
    position (render_prompts preserves axis order). Whitespace-only
    responses are dropped and counted in the skip report. Exact duplicate
    texts within a class are dropped.
    """
    if per_prompt < 1:
        raise CaptionError(f"per_prompt must be >= 1, got {per_prompt}")
    axis_values: Sequence[str | None]
    if template is not None and template.axis_values:
        if len(prompts) != len(template.axis_values):
            raise CaptionError(
                "prompt list length does not match the template's axis values"
            )
        axis_values = template.axis_values
    else:
        axis_values = [None] * len(prompts)

    records: list[CaptionRecord] = []
    seen_texts: set[str] = set()
    for prompt, axis_value in zip(prompts, axis_values):
        digest = request_hash(provider.model_id, prompt, {**provider.params, "n": per_prompt})
        responses = cache.get(digest) if cache is not None else None
        if responses is None:
            responses = provider.complete(prompt, per_prompt)
            if cache is not None:
                cache.put(digest, responses)
        for idx, text in enumerate(responses):
            if not text or not text.strip():
                if skip_report is not None:
                    skip_report.add(prompt, "empty response")
                continue
            if text in seen_texts:
                if skip_report is not None:
                    skip_report.add(prompt, "duplicate text")
                continue
            seen_texts.add(text)
            records.append(
                CaptionRecord(
                    caption_id=f"{hashlib.sha256((digest + str(idx)).encode()).hexdigest()[:16]}",
                    label=class_name,
                    long_text=text,
                    provenance={
                        "template_id": template.template_id if template else None,
                        "axis_value": axis_value,
                        "model_id": provider.model_id,
                        "request_hash": digest,
                    },
                )
            )
    return records


def _truncate_words(text: str, budget: int) -> str:
    words = text.split()
    return " ".join(words[:budget])


def summarize_caption(
    provider,
    long_text: str,
    word_budget: int = DEFAULT_SUMMARY_WORD_BUDGET,
    cache: ResponseCache | None = None,
) -> str:
    """Compress a long caption into a concise form within the word budget.

    Cached by content hash. A summary over budget gets one retry; if the
    retry is still over budget it is truncated at a word boundary and the
    truncation is logged.
    """
    if not long_text or not long_text.strip():
        raise CaptionError("long_text must be non-empty")
    digest = hashlib.sha256(f"summary|{provider.model_id}|{long_text}".encode()).hexdigest()
    if cache is not None:
        cached = cache.get(digest)
        if cached is not None:
            return cached[0]
    summary = provider.summarize(long_text)
    if not summary or not summary.strip():
        raise ProviderError("provider returned an empty summary")
    if len(summary.split()) > word_budget:
        summary = provider.summarize(long_text)
        if len(summary.split()) > word_budget:
            logger.warning("summary over budget after retry; truncating at word boundary")
            summary = _truncate_words(summary, word_budget)
    if cache is not None:
        cache.put(digest, [summary])
    return summary


def append_class_name(short_text: str, class_name: str) -> str:
    """Append ", <class_name>" to a caption; a no-op when the caption
    already ends with the class name."""
    if not short_text or not class_name:
        raise CaptionError("both short_text and class_name must be non-empty")
    if short_text == class_name or short_text.endswith(f", {class_name}"):
        return short_text
    return f"{short_text}, {class_name}"


def build_flyp_captions(class_names: Sequence[str], dataset_name: str = "") -> CaptionStore:
    """Class-name-only captions ("a photo of a <class>"), one per class."""
    if not class_names:
        raise CaptionError("class list must be non-empty")
    if len(set(class_names)) != len(class_names):
        raise CaptionError("duplicate class names in input")
    records = []
    for idx, name in enumerate(class_names):
        records.append(
            CaptionRecord(
                caption_id=f"flyp-{idx:04d}",
                label=name,
                long_text=f"a photo of a {name.replace('_', ' ')}",
                provenance={"template_id": "flyp", "axis_value": None, "model_id": "none",
                            "request_hash": None},
            )
        )
    return CaptionStore(dataset_name=dataset_name, records=records)


# --- review verdict sidecar -------------------------------------------------

def load_verdicts(path: str | Path) -> dict[str, str]:
    """Read a verdict sidecar, keeping the intact prefix if the file has a
    corrupted tail (e.g. after an interrupt mid-write)."""
    path = Path(path)
    verdicts: dict[str, str] = {}
    if not path.exists():
        return verdicts
    good_lines: list[str] = []
    for line in path.read_text(encoding="utf-8").split("\n"):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            verdicts[obj["caption_id"]] = obj["verdict"]
        except (json.JSONDecodeError, KeyError):
            logger.warning("verdict sidecar %s: corrupt tail dropped, rebuilding", path)
            path.write_text("\n".join(good_lines) + ("\n" if good_lines else ""), encoding="utf-8")
            break
        good_lines.append(line)
    return verdicts


def append_verdict(path: str | Path, caption_id: str, verdict: str) -> None:
    if verdict not in ("keep", "discard"):
        raise CaptionError(f"verdict must be 'keep' or 'discard', got {verdict!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(
            json.dumps({"caption_id": caption_id, "verdict": verdict, "timestamp": time.time()})
            + "\n"
        )


def discarded_ids(path: str | Path) -> set[str]:
    return {cid for cid, verdict in load_verdicts(path).items() if verdict == "discard"}
