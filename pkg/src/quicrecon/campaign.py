"""Checkpointed campaign runs: streaming output with atomic state
snapshots so an interrupted run resumes without losing or duplicating
results.

The invariant is exactly-once emission per input unit: results are
appended to the output file, the file is flushed, and only then is the
state (cursor plus output byte offset) atomically replaced.  Resuming
truncates the output back to the last checkpointed offset, discarding
any partially written tail, and continues from the cursor.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

DEFAULT_CHECKPOINT_EVERY = 200

FaultHook = Callable[[str, int], None]


class ConfigInvalid(Exception):
    pass


class ResumeDigestMismatch(Exception):
    pass


@dataclass
class CampaignState:
    campaign_id: str
    input_digest: str
    cursor: int
    output_path: str
    output_offset: int
    config_snapshot: dict = field(default_factory=dict)
    done: bool = False

    def save(self, path: Path) -> None:
        temporary = path.with_suffix(".tmp")
        temporary.write_text(json.dumps(asdict(self), indent=2))
        os.replace(temporary, path)

    @classmethod
    def load(cls, path: Path) -> "CampaignState":
        data = json.loads(path.read_text())
        return cls(**data)


def digest_file(path: str | Path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            hasher.update(block)
    return hasher.hexdigest()


def state_path(state_dir: str | Path, campaign_id: str) -> Path:
    return Path(state_dir) / f"{campaign_id}.state.json"


def _truncate_output(path: Path, offset: int) -> None:
    if not path.exists():
        if offset:
            raise ConfigInvalid(f"cannot resume: output file {path} is missing")
        return
    with open(path, "r+b") as fh:
        fh.truncate(offset)


def run_checkpointed(
    campaign_id: str,
    items: Sequence[str],
    input_digest: str,
    process: Callable[[Sequence[str]], Iterable[str]],
    output_path: str | Path,
    state_dir: str | Path,
    config_snapshot: dict | None = None,
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY,
    resume: bool = False,
    fault_hook: FaultHook | None = None,
) -> CampaignState:
    """Feed `items` through `process` in chunks, appending returned
    lines to `output_path` with a checkpoint after every chunk.

    `fault_hook(stage, cursor)` is a test seam called at the crash
    windows ("after_write", "after_checkpoint"); production runs leave
    it unset.
    """
    output_path = Path(output_path)
    state_file = state_path(state_dir, campaign_id)
    Path(state_dir).mkdir(parents=True, exist_ok=True)

    if resume:
        if not state_file.exists():
            raise ConfigInvalid(f"no saved state for campaign {campaign_id!r}")
        state = CampaignState.load(state_file)
        if state.input_digest != input_digest:
            raise ResumeDigestMismatch(
                f"input digest {input_digest[:12]} does not match the campaign's "
                f"{state.input_digest[:12]}; refusing to resume"
            )
        if state.done:
            return state
        _truncate_output(output_path, state.output_offset)
    else:
        state = CampaignState(
            campaign_id=campaign_id,
            input_digest=input_digest,
            cursor=0,
            output_path=str(output_path),
            output_offset=0,
            config_snapshot=config_snapshot or {},
        )
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text("")
        state.save(state_file)

    with open(output_path, "ab") as out:
        while state.cursor < len(items):
            chunk = items[state.cursor : state.cursor + checkpoint_every]
            for line in process(chunk):
                out.write(line.encode("utf-8") + b"\n")
            out.flush()
            os.fsync(out.fileno())
            if fault_hook is not None:
                fault_hook("after_write", state.cursor)
            state.cursor += len(chunk)
            state.output_offset = out.tell()
            state.save(state_file)
            if fault_hook is not None:
                fault_hook("after_checkpoint", state.cursor)
    state.done = True
    state.save(state_file)
    return state
