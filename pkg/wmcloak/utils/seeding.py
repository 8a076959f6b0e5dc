# wmcloak/utils/seeding.py
import hashlib
import json
from typing import Any, Dict

import torch


def derive_seed(root_seed: int, component: str) -> int:
    """Fan a root seed out to a per-component seed"""
    digest = hashlib.sha256(f"{int(root_seed)}:{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def torch_generator(seed: int) -> torch.Generator:
    """CPU generator seeded for reproducible sampling"""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def config_digest(config: Dict[str, Any]) -> str:
    """Stable digest of a JSON-serialisable config record"""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def parameter_checksum(module: torch.nn.Module) -> str:
    """Checksum over every parameter and buffer of a module"""
    sha = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        sha.update(name.encode("utf-8"))
        sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()
