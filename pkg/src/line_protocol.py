#!/usr/bin/env python3
"""
Line Protocol Adapter for Harborsight
Talks to an external model process (a real promptable segmenter or diffusion
inpainter) over line-delimited JSON on its stdin/stdout.

Requests and responses (one JSON object per line):
    {"op": "ping"}                                   → {"ok": true}
    {"op": "masks", "image": path, "prompts": [[u, v], ...]}
        → {"masks": [{"prompt": i, "rle": [...], "shape": [H, W]}], "skipped": [{"prompt": i, "reason": s}]}
    {"op": "inpaint", "image": path, "mask_rle": [...], "shape": [H, W], "class_index": c,
     "prompt": text, "guidance_scale": g, "inference_steps": n, "seed": s}
        → {"image": output_path}

Run-length encoding is row-major, alternating run lengths, starting with a run of zeros.
Automatically falls back to the built-in mocks when the process is unavailable.
"""

import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from corpus_io import load_png, save_png
from inpaint_orchestrator import InpaintConfig, InpaintRequest, InpainterInterface, MockTextureInpainter
from mask_ops import BinaryMask
from prompt_masker import MaskerResult, PromptMaskerInterface, RegionGrowMasker, SkippedPrompt

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

logger = logging.getLogger(__name__)


class AdapterConnectionError(Exception):
    """Exception for external processes that cannot be started or stop answering"""
    pass


class AdapterProtocolError(Exception):
    """Exception for malformed or failed protocol responses"""
    pass


def rle_encode(mask: np.ndarray) -> List[int]:
    """Row-major alternating runs, first run counts zeros (possibly 0)"""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    total = int(shape[0]) * int(shape[1])
    if sum(runs) != total or any(r < 0 for r in runs):
        raise AdapterProtocolError(f"RLE runs sum to {sum(runs)}, expected {total}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(shape)


@dataclass
class AdapterConfig:
    """Command line of an external model process"""
    command: List[str] = field(default_factory=list)
    timeout: float = 30.0

    @classmethod
    def from_env(cls, variable: str) -> "AdapterConfig":
        """Create config from an environment variable such as HARBORSIGHT_MASKER_CMD"""
        return cls(command=shlex.split(os.getenv(variable, "")))


class LineProtocolClient:
    """
    One external process per client; requests are serialized under a lock so
    the client can be shared by evaluation threads.
    """

    def __init__(self, config: AdapterConfig):
        self.config = config
        self.process: Optional[subprocess.Popen] = None
        self.available = False
        self._lock = threading.Lock()
        self._check_availability()

    def _check_availability(self) -> None:
        """Start the process and require an answer to a ping"""
        if not self.config.command:
            logger.warning("No external model command configured")
            return
        try:
            self.process = subprocess.Popen(
                self.config.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
            reply = self.request({"op": "ping"}, check=False)
            self.available = bool(reply.get("ok"))
        except (OSError, AdapterConnectionError, AdapterProtocolError) as e:
            logger.warning(f"External model process unavailable: {e}")
            self.close()
            self.available = False

    def is_available(self) -> bool:
        return self.available and self.process is not None and self.process.poll() is None

    def request(self, payload: Dict[str, Any], check: bool = True) -> Dict[str, Any]:
        if check and not self.is_available():
            raise AdapterConnectionError("External model process is not available")
        if self.process is None or self.process.stdin is None or self.process.stdout is None:
            raise AdapterConnectionError("External model process is not running")
        with self._lock:
            try:
                self.process.stdin.write(json.dumps(payload, sort_keys=True) + "\n")
                self.process.stdin.flush()
                line = self.process.stdout.readline()
            except (BrokenPipeError, OSError) as e:
                raise AdapterConnectionError(f"Lost connection to external process: {e}")
        if not line:
            raise AdapterConnectionError("External process closed its output")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as e:
            raise AdapterProtocolError(f"Invalid JSON reply: {e}")
        if "error" in reply:
            raise AdapterProtocolError(f"External process error: {reply['error']}")
        return reply

    def close(self) -> None:
        if self.process is not None:
            try:
                if self.process.stdin:
                    self.process.stdin.close()
                self.process.wait(timeout=self.config.timeout)
            except (OSError, subprocess.TimeoutExpired):
                self.process.kill()
            self.process = None
        self.available = False


class _ImageSpool:
    """Temporary PNG files handed to the external process"""

    def __init__(self):
        self.directory = Path(tempfile.mkdtemp(prefix="harborsight_"))
        self._counter = 0
        self._lock = threading.Lock()

    def write(self, image: np.ndarray) -> Path:
        with self._lock:
            self._counter += 1
            path = self.directory / f"request_{self._counter:06d}.png"
        return save_png(image, path)


class ExternalMasker(PromptMaskerInterface):
    name = "external_masker"

    def __init__(self, client: LineProtocolClient):
        self.client = client
        self.spool = _ImageSpool()

    def masks_for_prompts(self, image: np.ndarray,
                          prompts: Sequence[Tuple[float, float]]) -> MaskerResult:
        path = self.spool.write(image)
        wire_prompts = [[None if not np.isfinite(u) else float(u), None if not np.isfinite(v) else float(v)]
                        for u, v in prompts]
        reply = self.client.request({"op": "masks", "image": str(path), "prompts": wire_prompts})
        result = MaskerResult()
        for entry in reply.get("masks", []):
            data = rle_decode(entry["rle"], tuple(entry["shape"]))
            if data.shape != image.shape[:2]:
                raise AdapterProtocolError(f"Mask shape {data.shape} differs from image {image.shape[:2]}")
            result.masks.append(BinaryMask(data, None, (int(entry["prompt"]),)))
        for entry in reply.get("skipped", []):
            index = int(entry["prompt"])
            u, v = prompts[index]
            result.skipped.append(self._skip(index, u, v, entry.get("reason", "skipped by external masker")))
        return result


class ExternalInpainter(InpainterInterface):
    name = "external_inpainter"

    def __init__(self, client: LineProtocolClient):
        self.client = client
        self.spool = _ImageSpool()

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        path = self.spool.write(request.image)
        reply = self.client.request({
            "op": "inpaint", "image": str(path), "mask_rle": rle_encode(request.mask.data),
            "shape": list(request.mask.shape), "class_index": request.mask.class_index,
            "prompt": request.prompt, "guidance_scale": request.config.guidance_scale,
            "inference_steps": request.config.inference_steps, "seed": request.config.rng_seed,
        })
        output = load_png(Path(reply["image"]))
        if output.shape != request.image.shape:
            raise AdapterProtocolError(f"Inpainted image {output.shape} differs from {request.image.shape}")
        return output


def create_masker(kind: str = "region_grow", color_tolerance: float = 0.08,
                  max_region_fraction: float = 0.5,
                  command: Optional[Sequence[str]] = None) -> PromptMaskerInterface:
    """Factory: 'external' starts the configured process and falls back to region growing"""
    fallback = RegionGrowMasker(color_tolerance, max_region_fraction)
    if kind != "external":
        return fallback
    config = AdapterConfig(list(command)) if command else AdapterConfig.from_env("HARBORSIGHT_MASKER_CMD")
    client = LineProtocolClient(config)
    if client.is_available():
        return ExternalMasker(client)
    logger.warning("Falling back to the region-grow masker")
    return fallback


def create_inpainter(kind: str = "mock", command: Optional[Sequence[str]] = None) -> InpainterInterface:
    """Factory: 'external' starts the configured process and falls back to the mock texture inpainter"""
    fallback = MockTextureInpainter()
    if kind != "external":
        return fallback
    config = AdapterConfig(list(command)) if command else AdapterConfig.from_env("HARBORSIGHT_INPAINTER_CMD")
    client = LineProtocolClient(config)
    if client.is_available():
        return ExternalInpainter(client)
    logger.warning("Falling back to the mock texture inpainter")
    return fallback


# ---------------------------------------------------------------- reference server

def handle_request(payload: Dict[str, Any], masker: PromptMaskerInterface,
                   inpainter: InpainterInterface) -> Dict[str, Any]:
    op = payload.get("op")
    if op == "ping":
        return {"ok": True}
    if op == "masks":
        image = load_png(Path(payload["image"]))
        prompts = [(float("nan") if u is None else u, float("nan") if v is None else v)
                   for u, v in payload.get("prompts", [])]
        result = masker.masks_for_prompts(image, prompts)
        return {"masks": [{"prompt": m.provenance[0], "rle": rle_encode(m.data), "shape": list(m.shape)}
                          for m in result.masks],
                "skipped": [{"prompt": s.index, "reason": s.reason} for s in result.skipped]}
    if op == "inpaint":
        image = load_png(Path(payload["image"]))
        mask = BinaryMask(rle_decode(payload["mask_rle"], tuple(payload["shape"])), payload.get("class_index"))
        config = InpaintConfig(payload["guidance_scale"], payload["inference_steps"], payload["seed"])
        output = inpainter.inpaint(InpaintRequest(image, mask, payload["prompt"], config))
        out_path = Path(payload["image"]).with_suffix(".inpainted.png")
        save_png(output, out_path)
        return {"image": str(out_path)}
    return {"error": f"unknown op {op!r}"}


def serve(stdin: TextIO, stdout: TextIO, masker: Optional[PromptMaskerInterface] = None,
          inpainter: Optional[InpainterInterface] = None) -> None:
    """Answer requests line by line until stdin closes"""
    masker = masker or RegionGrowMasker()
    inpainter = inpainter or MockTextureInpainter()
    for line in stdin:
        if not line.strip():
            continue
        try:
            reply = handle_request(json.loads(line), masker, inpainter)
        except Exception as e:
            reply = {"error": str(e)}
        stdout.write(json.dumps(reply, sort_keys=True) + "\n")
        stdout.flush()


def main():
    """CLI interface: serve the built-in mocks over the line protocol"""
    import argparse

    parser = argparse.ArgumentParser(description='Harborsight line-protocol reference server')
    parser.add_argument('command', choices=['serve'], help='Serve mock masker and inpainter on stdin/stdout')
    parser.add_argument('--color-tolerance', type=float, default=0.08)
    parser.add_argument('--max-region-fraction', type=float, default=0.5)
    args = parser.parse_args()

    serve(sys.stdin, sys.stdout, RegionGrowMasker(args.color_tolerance, args.max_region_fraction))


if __name__ == '__main__':
    main()
