"""Fixed-capacity FIFO dictionary of past key embeddings (the negatives).

The buffer is a K x D ring; write_pointer marks the next slot to overwrite.
negatives_view returns a cloned snapshot in insertion order (oldest first),
so later enqueues never alias into a snapshot already handed to the loss.
"""

from __future__ import annotations

import torch

from .encoders import EmbeddingBatch


class QueueError(RuntimeError):
    pass


class EmptyQueueError(QueueError):
    pass


class CapacityError(QueueError):
    pass


class ContractError(QueueError):
    """Keys violate the queue's normalization contract."""


class NegativeQueue:
    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity <= 0 or dim <= 0:
            raise QueueError(f"capacity and dim must be positive, got K={capacity}, D={dim}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.write_pointer = 0
        self.filled = 0

    def enqueue(self, keys: EmbeddingBatch) -> "NegativeQueue":
        """Write keys at the pointer with wraparound; oldest rows go first."""
        vecs = keys.vectors.detach()
        b = vecs.shape[0]
        if b > self.capacity:
            raise CapacityError(f"batch of {b} exceeds queue capacity {self.capacity}")
        norms = vecs.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise ContractError("enqueued keys must be unit-norm")
        vecs = vecs.to(self.buffer.dtype)
        end = self.write_pointer + b
        if end <= self.capacity:
            self.buffer[self.write_pointer:end] = vecs
        else:
            first = self.capacity - self.write_pointer
            self.buffer[self.write_pointer:] = vecs[:first]
            self.buffer[:end - self.capacity] = vecs[first:]
        self.write_pointer = end % self.capacity
        self.filled = min(self.capacity, self.filled + b)
        return self

    def negatives_view(self) -> torch.Tensor:
        """Snapshot of the filled rows, oldest first; safe against later enqueues."""
        if self.filled == 0:
            raise EmptyQueueError("negatives requested from an empty queue")
        if self.filled < self.capacity:
            return self.buffer[:self.filled].clone()
        return torch.cat([self.buffer[self.write_pointer:],
                          self.buffer[:self.write_pointer]]).clone()

    def state_dict(self) -> dict:
        return {"buffer": self.buffer.clone(), "write_pointer": self.write_pointer,
                "filled": self.filled, "capacity": self.capacity, "dim": self.dim}

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise QueueError(f"queue shape mismatch: checkpoint K={state['capacity']} "
                             f"D={state['dim']}, queue K={self.capacity} D={self.dim}")
        self.buffer = state["buffer"].clone()
        self.write_pointer = int(state["write_pointer"])
        self.filled = int(state["filled"])
