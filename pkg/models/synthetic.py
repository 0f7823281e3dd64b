"""
Desk-scale model builders.

- random_model(): tiny randomly initialised models for oracle tests
- build_task_dependent_fixture(): a hand-wired model whose best omission set
  depends on the task, plus prompt/answer sampling for each task

Fixture wiring (one-hot residual stream, attention zeroed):
- residual dims 0..V-1 carry the current token, dims V.. are one damage
  channel per task
- the head maps each token dim to its successor logits; a damage channel
  boosts that task's wrong-answer tokens
- block j belongs to task j // blocks_per_task: it writes ``answer_damage``
  into that task's channel when the current token is an answer context, and
  ``prompt_damage`` into the next task's channel on that task's prompt tokens

So a task's best omission set is its own blocks, while calibrating on the
prompt alone points at the previous task's blocks.
"""

import logging
import math
from dataclasses import dataclass

import torch

from models.transformer import ModelConfig, PositionalKind, TransformerModel

logger = logging.getLogger(__name__)


def random_model(config: ModelConfig, seed: int, scale: float = 0.5) -> TransformerModel:
    """
    Build a model with normally distributed weights.

    Args:
        config: Model shape
        seed: Generator seed; equal seeds give identical weights
        scale: Weight standard deviation multiplier

    Returns:
        TransformerModel with finite random weights
    """
    gen = torch.Generator().manual_seed(seed)
    model = TransformerModel(config)

    def fill(t: torch.Tensor, std: float) -> None:
        t.copy_(torch.randn(t.shape, generator=gen) * std)

    d = config.d_model
    fill(model.frame.token_embedding, scale)
    fill(model.frame.pos_embedding, scale * 0.1)
    fill(model.frame.output_head, scale / math.sqrt(d))
    model.frame.final_norm.copy_(1.0 + 0.1 * torch.randn(d, generator=gen))
    for block in model.blocks:
        for name, tensor in block.tensors():
            if name.endswith("norm"):
                tensor.copy_(1.0 + 0.1 * torch.randn(d, generator=gen))
            else:
                fill(tensor, scale / math.sqrt(tensor.shape[0]))
    return model


@dataclass(frozen=True)
class SyntheticTask:
    """Token vocabulary of one synthetic task."""

    name: str
    prompt_tokens: tuple[int, ...]
    query_token: int
    answer: tuple[int, ...]
    wrong_answer: tuple[int, ...]


@dataclass(frozen=True)
class TaskFixture:
    """A task-dependent model and the tasks it was wired for."""

    model: TransformerModel
    tasks: tuple[SyntheticTask, ...]
    blocks_per_task: int

    def own_blocks(self, task_index: int) -> tuple[int, ...]:
        """1-based blocks whose removal repairs task ``task_index``."""
        start = task_index * self.blocks_per_task + 1
        return tuple(range(start, start + self.blocks_per_task))


def build_task_dependent_fixture(
    n_tasks: int = 3,
    blocks_per_task: int = 2,
    prompt_vocab: int = 6,
    answer_damage: float = 2.0,
    prompt_damage: float = 0.5,
    successor_logit: float = 1.0,
) -> TaskFixture:
    """
    Wire a model whose optimal omission set differs per task.

    Args:
        n_tasks: Number of tasks (>= 2)
        blocks_per_task: Blocks that damage each task; also the natural k
        prompt_vocab: Prompt tokens per task
        answer_damage: Channel write on answer contexts (before normalisation)
        prompt_damage: Channel write on the next task's prompt tokens
        successor_logit: Head weight on the base successor tokens

    Returns:
        TaskFixture with a float32 model of n_tasks * blocks_per_task blocks
    """
    per_task = prompt_vocab + 5  # prompt, query, answer (2), wrong answer (2)
    vocab = n_tasks * per_task
    d_model = vocab + n_tasks
    n_blocks = n_tasks * blocks_per_task
    config = ModelConfig(
        vocab_size=vocab,
        d_model=d_model,
        d_ff=d_model,
        n_blocks=n_blocks,
        n_heads=1,
        pos_kind=PositionalKind.LEARNED,
        max_seq_len=64,
    )
    model = TransformerModel(config)
    frame = model.frame

    tasks = []
    for t in range(n_tasks):
        base = t * per_task
        prompt = tuple(range(base, base + prompt_vocab))
        query = base + prompt_vocab
        a1, a2, w1, w2 = (query + 1, query + 2, query + 3, query + 4)
        tasks.append(
            SyntheticTask(
                name=f"task_{chr(ord('a') + t)}",
                prompt_tokens=prompt,
                query_token=query,
                answer=(a1, a2),
                wrong_answer=(w1, w2),
            )
        )

    frame.token_embedding.copy_(torch.eye(vocab, d_model))
    head = frame.output_head
    for t, task in enumerate(tasks):
        a1, a2 = task.answer
        w1, w2 = task.wrong_answer
        for p in task.prompt_tokens:
            for nxt in (*task.prompt_tokens, task.query_token):
                head[p, nxt] = successor_logit
        head[task.query_token, a1] = successor_logit
        head[a1, a2] = successor_logit
        head[w1, w2] = successor_logit
        channel = vocab + t
        head[channel, w1] = 1.0
        head[channel, w2] = 1.0

    # A normalised one-hot token has magnitude sqrt(d_model) on its dim.
    gain = math.sqrt(d_model)
    for j, block in enumerate(model.blocks):
        owner = j // blocks_per_task
        victim = (owner + 1) % n_tasks
        task, next_task = tasks[owner], tasks[victim]
        for u in (task.query_token, task.answer[0], task.wrong_answer[0]):
            block.w_up[u, 0] = 1.0
        block.w_down[0, vocab + owner] = answer_damage / gain
        for u in next_task.prompt_tokens:
            block.w_up[u, 1] = 1.0
        block.w_down[1, vocab + victim] = prompt_damage / gain

    logger.info(
        f"Built task-dependent fixture: {n_tasks} tasks, {n_blocks} blocks, "
        f"vocab {vocab}"
    )
    return TaskFixture(model=model, tasks=tuple(tasks), blocks_per_task=blocks_per_task)


def sample_task_pairs(
    task: SyntheticTask,
    n: int,
    seed: int,
    min_prompt: int = 3,
    max_prompt: int = 6,
) -> list[dict[str, list]]:
    """
    Draw ``n`` prompt/answer records for ``task``.

    Prompts are random runs of the task's prompt tokens followed by its query
    token; the answer and the single wrong answer are fixed per task.

    Returns:
        Records with prompt_tokens / answer_tokens / wrong_answers keys, the
        same shape the calibration JSONL files use
    """
    gen = torch.Generator().manual_seed(seed)
    records = []
    for _ in range(n):
        length = int(torch.randint(min_prompt, max_prompt + 1, (1,), generator=gen))
        picks = torch.randint(0, len(task.prompt_tokens), (length,), generator=gen)
        prompt = [task.prompt_tokens[int(i)] for i in picks] + [task.query_token]
        records.append(
            {
                "prompt_tokens": prompt,
                "answer_tokens": list(task.answer),
                "wrong_answers": [list(task.wrong_answer)],
            }
        )
    return records
