"""Post-GEMM output processing, applied one cache block at a time.

A pipeline is a list of 32-bit stages (sparse add, bias add) followed by
exactly one writer.  The requantizing writer may be followed by
:class:`ReluQuantized`, which is folded into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from qgemm.quant import ColOffsets, QuantParams, RequantParams, adjust, requantize_array
from qgemm.sparse import SparseWeightCSC, spmdm_block


class PipelineError(ValueError):
    pass


@dataclass
class BlockContext:
    """Where a block sits in the output plus the data stages may index."""

    ic: int
    jc: int
    A: np.ndarray
    row_offsets: Optional[np.ndarray] = None  # full-depth sums for rows ic .. ic+rows


@dataclass(frozen=True)
class SpMDMAdd:
    sparse: SparseWeightCSC

    def apply(self, block, ctx):
        spmdm_block(ctx.A, self.sparse, block, ctx.ic, ctx.jc)


@dataclass(frozen=True)
class BiasAdd:
    bias: np.ndarray

    def apply(self, block, ctx):
        block += np.asarray(self.bias, dtype=np.int32)[ctx.jc:ctx.jc + block.shape[1]]


@dataclass(frozen=True)
class ReluQuantized:
    """Clamp requantized output at the output zero point."""


@dataclass(frozen=True)
class WriteRawI32:
    dtype = np.dtype(np.int32)
    needs_row_offsets = False

    def write(self, block, ctx, out):
        out[ctx.ic:ctx.ic + block.shape[0], ctx.jc:ctx.jc + block.shape[1]] = block


def _slice_cols(values, jc, n):
    return None if values is None else np.asarray(values)[jc:jc + n]


@dataclass(frozen=True)
class Requantize:
    """Writer: 32-bit accumulators to unsigned 8-bit output."""

    params: RequantParams
    col_offsets: Optional[ColOffsets] = None
    relu: bool = False
    dtype = np.dtype(np.uint8)

    def __post_init__(self):
        if self.params.zp_a and self.col_offsets is None:
            raise PipelineError("Requantize with nonzero zp_a needs column offsets")

    @property
    def needs_row_offsets(self) -> bool:
        return self.params.zp_b != 0

    def _adjusted(self, block, ctx):
        rows, cols = block.shape
        ro = ctx.row_offsets
        if self.needs_row_offsets and ro is None:
            raise PipelineError("row offsets required (zp_b != 0) but not provided")
        co = None if self.col_offsets is None else self.col_offsets.values
        return adjust(block, None if ro is None else ro[:rows], _slice_cols(co, ctx.jc, cols),
                      self.params, _slice_cols(self.params.bias, ctx.jc, cols))

    def write(self, block, ctx, out):
        rows, cols = block.shape
        out[ctx.ic:ctx.ic + rows, ctx.jc:ctx.jc + cols] = requantize_array(
            self._adjusted(block, ctx), self.params, relu=self.relu)


@dataclass(frozen=True)
class WriteDequantF32(Requantize):
    """Writer: real-valued float32 output ``scale_a * scale_b * adjusted``.

    The product of input scales is recovered as ``multiplier * c_params.scale``.
    """

    c_params: Optional[QuantParams] = None
    dtype = np.dtype(np.float32)

    def __post_init__(self):
        super().__post_init__()
        if self.c_params is None:
            raise PipelineError("WriteDequantF32 needs the output quant params")
        if self.relu:
            raise PipelineError("ReluQuantized only follows the requantizing writer")

    def write(self, block, ctx, out):
        rows, cols = block.shape
        real_scale = self.params.multiplier * self.c_params.scale
        out[ctx.ic:ctx.ic + rows, ctx.jc:ctx.jc + cols] = (
            real_scale * self._adjusted(block, ctx).astype(np.float64)).astype(np.float32)


Stage = Union[SpMDMAdd, BiasAdd, ReluQuantized, WriteRawI32, Requantize, WriteDequantF32]
_TRANSFORMS = (SpMDMAdd, BiasAdd)
_WRITERS = (WriteRawI32, Requantize)  # WriteDequantF32 is a Requantize subclass


def validate(stages: Sequence) -> None:
    """Raise :class:`PipelineError` listing every ordering violation."""
    problems = []
    stages = list(stages)
    if not stages:
        raise PipelineError("pipeline is empty; it must end in a writer")
    writer_at = [i for i, s in enumerate(stages) if isinstance(s, _WRITERS)]
    if not writer_at:
        problems.append("no writer stage")
    elif len(writer_at) > 1:
        problems.append(f"{len(writer_at)} writer stages at positions {writer_at}; exactly one allowed")
    for i, s in enumerate(stages):
        name = type(s).__name__
        if isinstance(s, _TRANSFORMS):
            if writer_at and i > writer_at[0]:
                problems.append(f"{name} at position {i} comes after the writer")
        elif isinstance(s, ReluQuantized):
            prev = stages[i - 1] if i else None
            if not (type(prev) is Requantize and i == len(stages) - 1):
                problems.append(f"ReluQuantized at position {i} must directly follow a final Requantize")
        elif isinstance(s, _WRITERS):
            tail = stages[i + 1:]
            if tail and not (type(s) is Requantize and len(tail) == 1 and isinstance(tail[0], ReluQuantized)):
                problems.append(f"{name} at position {i} is not last")
        else:
            problems.append(f"unknown stage {s!r} at position {i}")
    if problems:
        raise PipelineError("; ".join(problems))


@dataclass
class OutputPipeline:
    stages: list = field(default_factory=lambda: [WriteRawI32()])

    def __post_init__(self):
        self.stages = list(self.stages)
        validate(self.stages)
        writer_idx = next(i for i, s in enumerate(self.stages) if isinstance(s, _WRITERS))
        self.transforms = self.stages[:writer_idx]
        writer = self.stages[writer_idx]
        if writer_idx + 1 < len(self.stages):
            writer = Requantize(writer.params, writer.col_offsets, relu=True)
        self.writer = writer

    @property
    def out_dtype(self) -> np.dtype:
        return self.writer.dtype

    @property
    def needs_row_offsets(self) -> bool:
        return self.writer.needs_row_offsets

    def run_block(self, acc_block: np.ndarray, ctx: BlockContext, out: np.ndarray) -> None:
        """Apply every stage to a finished 32-bit block and write it to ``out``.

        ``acc_block`` is modified in place by the 32-bit stages.
        """
        for stage in self.transforms:
            stage.apply(acc_block, ctx)
        self.writer.write(acc_block, ctx, out)


def run_block(pipeline: OutputPipeline, acc_block, ctx: BlockContext, out) -> None:
    pipeline.run_block(acc_block, ctx, out)


def apply_whole(pipeline: OutputPipeline, acc: np.ndarray, A: np.ndarray,
                row_offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """Run ``pipeline`` on a fully materialized 32-bit result as one block."""
    out = np.empty(acc.shape, dtype=pipeline.out_dtype)
    pipeline.run_block(acc.astype(np.int32, copy=True), BlockContext(0, 0, A, row_offsets), out)
    return out


def relu_quantized(q, zp_c: int):
    return np.maximum(q, zp_c) if isinstance(q, np.ndarray) else max(q, zp_c)
