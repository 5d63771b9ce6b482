"""Data-parallel gradient synchronization.

Each replica computes gradients on its shard of the global batch; before
the optimizer step every replica holds the element-wise mean.  The same
contract backs an in-process replica simulator (tests) and a
``torch.distributed`` process group (``torchrun``).
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.distributed as dist


class ShardMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DistContext:
    rank: int = 0
    world_size: int = 1

    @property
    def enabled(self) -> bool:
        return self.world_size > 1 and dist.is_available() and dist.is_initialized()

    @property
    def is_main(self) -> bool:
        return self.rank == 0

    def barrier(self) -> None:
        if self.enabled:
            dist.barrier()

    def all_reduce_sum(self, value: float) -> float:
        if not self.enabled:
            return value
        t = torch.tensor([value], dtype=torch.float64)
        dist.all_reduce(t)
        return float(t.item())

    def check_shard_sizes(self, size: int) -> None:
        if not self.enabled:
            return
        sizes = [None] * self.world_size
        dist.all_gather_object(sizes, size)
        if len(set(sizes)) != 1:
            raise ShardMismatchError(f"replica shard sizes differ: {sizes}")

    def average_gradients(self, params: Sequence[torch.Tensor]) -> None:
        """All-reduce mean of ``.grad`` in place across the process group."""
        if not self.enabled:
            return
        for p in params:
            if p.grad is not None:
                dist.all_reduce(p.grad)
                p.grad.div_(self.world_size)


def context_from_env() -> DistContext:
    """Join the process group described by torchrun-style environment variables."""
    world = int(os.environ.get("WORLD_SIZE", "1"))
    if world <= 1:
        return DistContext()
    rank = int(os.environ["RANK"])
    if not dist.is_initialized():
        backend = "nccl" if torch.cuda.is_available() else "gloo"
        dist.init_process_group(backend, rank=rank, world_size=world)
    return DistContext(rank, world)


def ddp_step_contract(replica_grads: Sequence[Sequence[torch.Tensor]], world_size: int,
                      shard_sizes: Sequence[int] | None = None) -> list[torch.Tensor]:
    """Element-wise mean of per-replica gradient lists."""
    if len(replica_grads) != world_size:
        raise ValueError(f"expected gradients from {world_size} replicas, got {len(replica_grads)}")
    if shard_sizes is not None and len(set(shard_sizes)) > 1:
        raise ShardMismatchError(f"replica shard sizes differ: {list(shard_sizes)}")
    lengths = {len(g) for g in replica_grads}
    if len(lengths) != 1:
        raise ValueError("replicas reported different numbers of gradient tensors")
    if world_size == 1:
        return list(replica_grads[0])
    return [torch.stack(group).mean(dim=0) for group in zip(*replica_grads)]


def replica_gradients(model: torch.nn.Module, shards: Sequence, loss_fn: Callable) -> list[list[torch.Tensor]]:
    """Run ``loss_fn(replica, shard)`` + backward on a fresh copy per shard; collect gradients.

    In-process stand-in for one synchronous data-parallel step.
    """
    grads = []
    for shard in shards:
        replica = copy.deepcopy(model)
        replica.zero_grad(set_to_none=True)
        loss_fn(replica, shard).backward()
        grads.append([p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                      for p in replica.parameters() if p.requires_grad])
    return grads
