"""
One function per `pudding` subcommand.

Each command prints staged progress to stdout ([OK] / [SKIP] / [WARN] lines
under ``=`` banners) and logs details through the module logger. With
``dry_run`` a command validates its inputs, prints the plan and returns
without writing anything.

Pipeline:
1. toy:           write the synthetic fixture and a ready-to-run config
2. search:        greedy omission search -> candidate pool
3. build-dataset: label prompts with per-set losses -> router dataset
4. train:         fit the router -> checkpoint
5. infer:         route, load and generate per prompt -> reports
6. bench:         speedup, comparison, heatmap and ablations -> tables
"""

import logging
from pathlib import Path

import polars as pl

from bench.ablation import ablate_pool_size, ablate_training_loss
from bench.compare import compare_methods
from bench.heatmap import HeatmapTable, compute_heatmap
from bench.reports import emit_reports, write_json
from bench.speedup import measure_speedup, synthetic_workload
from errors import ConfigError, InvalidKError
from loaders.block_store import BlockStore
from loaders.load_estimate import (
    LLAMA_3_1_8B,
    load_time_table,
    surviving_fraction_of_file,
)
from models.synthetic import build_task_dependent_fixture, sample_task_pairs
from models.tokenizer import Tokenizer, build_tokenizer
from models.transformer import ModelConfig, TransformerModel
from models.weights_io import load_model, open_layout, save_model
from pipelines.config import DatasetSpec, RunConfig, require_paths
from pipelines.inference import run_inference, write_reports
from routing.checkpoint import load_router, save_router
from routing.dataset import (
    build_router_dataset,
    load_router_dataset,
    save_router_dataset,
    split_samples,
)
from routing.routing import evaluate_router
from routing.training import TrainConfig, train_router
from scoring.losses import PromptAnswerPair
from search.calibration import (
    CalibrationDataset,
    load_calibration_dataset,
    load_pairs,
    records_to_pairs,
    save_pairs,
)
from search.omission import greedy_agreement
from search.pool import CandidatePool, generate_pool

logger = logging.getLogger(__name__)

BANNER = "=" * 80


def banner(title: str) -> None:
    print("\n" + BANNER)
    print(title)
    print(BANNER)


def print_plan(steps: list[str]) -> None:
    print("\n[DRY RUN] Execution plan:")
    for i, step in enumerate(steps, start=1):
        print(f"  {i}. {step}")
    print("[DRY RUN] No outputs written")


def _tokenizer(config: RunConfig) -> Tokenizer:
    return build_tokenizer(config.tokenizer, config.vocab_path)


def _check_k(config: RunConfig, model_config: ModelConfig) -> None:
    if not 0 <= config.k <= model_config.n_blocks - 1:
        raise InvalidKError(
            f"k={config.k} violates 0 <= k <= d-1 for a "
            f"{model_config.n_blocks}-block model"
        )


def _require_datasets(specs: list[DatasetSpec], role: str) -> None:
    if not specs:
        raise ConfigError(f"No {role} datasets configured")
    require_paths(**{f"{role} dataset '{s.name}'": s.path for s in specs})


def _load_task_pairs(
    specs: list[DatasetSpec], tokenizer: Tokenizer
) -> dict[str, list[PromptAnswerPair]]:
    return {spec.name: load_pairs(spec.path, tokenizer) for spec in specs}


def _calibration_datasets(
    config: RunConfig, tokenizer: Tokenizer, specs: list[DatasetSpec]
) -> list[CalibrationDataset]:
    return [
        load_calibration_dataset(
            spec.name,
            spec.path,
            tokenizer,
            config.calibration_samples,
            config.seed_for("search"),
        )
        for spec in specs
    ]


def _train_config(config: RunConfig) -> TrainConfig:
    """Training settings with the seed taken from the train stream."""
    return config.train.model_copy(update={"seed": config.seed_for("train")})


def _load_prompts(path: Path, tokenizer: Tokenizer) -> list[tuple[int, ...]]:
    """One prompt per non-blank line."""
    lines = path.read_text(encoding="utf-8").splitlines()
    return [tokenizer.encode(line) for line in lines if line.strip()]


# ==========================================================================
# SEARCH
# ==========================================================================
def cmd_search(config: RunConfig, dry_run: bool = False) -> Path:
    """Generate the candidate pool and print its provenance table."""
    banner("PUDDING: CANDIDATE POOL SEARCH")
    require_paths(model_path=config.model_path)
    _require_datasets(config.datasets, "calibration")
    layout = open_layout(config.model_path)
    _check_k(config, layout.config)

    if dry_run:
        print_plan(
            [
                f"Load {layout.config.n_blocks}-block model from {config.model_path}",
                f"Sample up to {config.calibration_samples} pairs from each of "
                f"{len(config.datasets)} datasets",
                f"Greedy search k={config.k} for criteria "
                f"{[str(c) for c in config.criteria]}",
                f"Write pool of {len(config.datasets) * len(config.criteria)} sets "
                f"to {config.pool_file}",
            ]
        )
        return config.pool_file

    print("\n[1/3] Loading model and calibration data...")
    model = load_model(config.model_path)
    tokenizer = _tokenizer(config)
    datasets = _calibration_datasets(config, tokenizer, config.datasets)
    print(f"[OK] {len(datasets)} calibration datasets")

    print("\n[2/3] Running greedy omission search...")
    try:
        pool = generate_pool(
            model, datasets, config.criteria, config.k, config.two_pass
        )
    except Exception as e:
        logger.error(f"Omission search failed: {e}")
        raise
    print(f"[OK] {pool.m} omission sets of size {pool.k}")

    print("\n[3/3] Writing pool...")
    pool.save(config.pool_file)
    with pl.Config(tbl_rows=-1, tbl_hide_dataframe_shape=True):
        print(pool.provenance_frame())
    print(f"[OK] Pool written to {config.pool_file}")
    return config.pool_file


# ==========================================================================
# BUILD DATASET
# ==========================================================================
def cmd_build_dataset(config: RunConfig, dry_run: bool = False) -> Path:
    """Label router prompts with their per-set losses."""
    banner("PUDDING: ROUTER DATASET")
    specs = config.router_dataset_specs()
    require_paths(model_path=config.model_path, pool_path=config.pool_file)
    _require_datasets(specs, "router")

    if dry_run:
        print_plan(
            [
                f"Load model {config.model_path} and pool {config.pool_file}",
                f"Score every pair of {[s.name for s in specs]} under each pool set "
                f"({config.label_criterion})",
                f"Write samples to {config.router_dataset_file}",
            ]
        )
        return config.router_dataset_file

    print("\n[1/2] Loading model, pool and pairs...")
    model = load_model(config.model_path)
    pool = CandidatePool.load(config.pool_file)
    tokenizer = _tokenizer(config)
    by_task = _load_task_pairs(specs, tokenizer)
    pairs = [pair for task_pairs in by_task.values() for pair in task_pairs]
    print(f"[OK] {len(pairs)} pairs, pool of {pool.m} sets")

    print("\n[2/2] Computing label vectors...")
    samples = build_router_dataset(model, pool, pairs, config.label_criterion)
    save_router_dataset(samples, config.router_dataset_file)
    print(f"[OK] {len(samples)} samples written to {config.router_dataset_file}")
    return config.router_dataset_file


# ==========================================================================
# TRAIN
# ==========================================================================
def cmd_train(config: RunConfig, dry_run: bool = False) -> Path:
    """Train the router and write its checkpoint."""
    banner("PUDDING: ROUTER TRAINING")
    require_paths(
        model_path=config.model_path,
        pool_path=config.pool_file,
        router_dataset_path=config.router_dataset_file,
    )
    train_config = _train_config(config)

    if dry_run:
        print_plan(
            [
                f"Load samples from {config.router_dataset_file}",
                f"Split {1 - config.val_fraction:.0%} train / "
                f"{config.val_fraction:.0%} validation",
                f"Train {train_config.epochs} epochs ({train_config.loss_mode}, "
                f"lr {train_config.learning_rate})",
                f"Write checkpoint to {config.router_file}",
            ]
        )
        return config.router_file

    print("\n[1/3] Loading samples...")
    pool = CandidatePool.load(config.pool_file)
    vocab_size = open_layout(config.model_path).config.vocab_size
    samples = load_router_dataset(config.router_dataset_file)
    train, val = split_samples(samples, config.val_fraction, config.seed_for("split"))
    print(f"[OK] {len(train)} training / {len(val)} validation samples")

    print("\n[2/3] Training router...")
    if train_config.epochs == 0:
        print("[WARN] epochs=0: checkpoint will hold the initialised weights")
    router = train_router(
        train, train_config, config.router.with_vocab(vocab_size), pool.fingerprint()
    )
    for epoch, loss in enumerate(router.epoch_losses, start=1):
        print(f"  epoch {epoch:>3}: loss {loss:.6f}")
    if val:
        metrics = evaluate_router(router, val)
        print(
            f"[OK] validation accuracy {metrics.accuracy:.3f}, "
            f"regret {metrics.regret:.6f}, mse {metrics.mse:.6f}"
        )
    else:
        print("[SKIP] No validation samples")

    print("\n[3/3] Writing checkpoint...")
    save_router(router, config.router_file)
    print(f"[OK] Router written to {config.router_file}")
    return config.router_file


# ==========================================================================
# INFER
# ==========================================================================
def cmd_infer(config: RunConfig, dry_run: bool = False) -> Path:
    """Route, load and generate for every prompt in the prompt file."""
    banner("PUDDING: ROUTED INFERENCE")
    require_paths(
        model_path=config.model_path,
        pool_path=config.pool_file,
        router_path=config.router_file,
        prompts_path=config.prompts_path,
    )
    reports_path = config.out_dir / "inference_reports.jsonl"
    generations_path = config.out_dir / "generations.jsonl"

    if dry_run:
        print_plan(
            [
                f"Open block store on {config.model_path}",
                f"Route each prompt of {config.prompts_path} once",
                f"Generate {config.max_new_tokens} tokens per prompt",
                f"Write {generations_path} and {reports_path}",
            ]
        )
        return reports_path

    print("\n[1/3] Loading router, pool and block store...")
    pool = CandidatePool.load(config.pool_file)
    router = load_router(config.router_file)
    n_blocks = open_layout(config.model_path).config.n_blocks
    cap = n_blocks - pool.k if config.memory_cap else None
    store = BlockStore(config.model_path, memory_cap=cap)
    prompts = _load_prompts(config.prompts_path, _tokenizer(config))
    print(f"[OK] {len(prompts)} prompts, residency cap {cap}")

    print("\n[2/3] Running inference...")
    reports, generations = [], []
    for i, prompt in enumerate(prompts):
        tokens, report = run_inference(
            store, router, pool, prompt, config.max_new_tokens, config.use_cache
        )
        reports.append(report)
        generations.append(
            {
                "prompt_index": i,
                "routed_index": report.routed_index,
                "omission_set": list(report.omission_set.indices),
                "blocks_loaded": list(report.blocks_loaded),
                "bytes_loaded": report.bytes_loaded,
                "tokens": list(tokens),
            }
        )
    print(
        f"[OK] {len(reports)} prompts, {router.route_calls} routing calls, "
        f"{store.bytes_transferred_total:,} bytes transferred"
    )

    print("\n[3/3] Writing reports...")
    write_reports(reports, reports_path)
    generations_path.parent.mkdir(parents=True, exist_ok=True)
    if generations:
        pl.DataFrame(generations).write_ndjson(generations_path)
    else:
        generations_path.write_text("", encoding="utf-8")
    print(f"[OK] Reports written to {reports_path}")
    return reports_path


# ==========================================================================
# BENCH
# ==========================================================================
def _load_estimates(model_path: Path, k: int) -> pl.DataFrame:
    """Transfer estimates for an 8B bf16 model and for the local weight file."""
    big_bytes = LLAMA_3_1_8B.total_params * 2
    big = load_time_table(
        big_bytes,
        {"dense": 1.0, "routed": LLAMA_3_1_8B.surviving_fraction(7)},
    ).with_columns(pl.lit(LLAMA_3_1_8B.name).alias("model"))
    layout = open_layout(model_path)
    local = load_time_table(
        layout.total_bytes,
        {"dense": 1.0, "routed": surviving_fraction_of_file(layout, k)},
    ).with_columns(pl.lit(model_path.name).alias("model"))
    columns = ["model", "method", "link", "fraction", "seconds"]
    return pl.concat([big, local]).select(columns)


def cmd_bench(config: RunConfig, dry_run: bool = False) -> Path:
    """Run the benchmark and ablation suite selected in [bench]."""
    banner("PUDDING: BENCHMARKS")
    bench = config.bench
    require_paths(
        model_path=config.model_path,
        pool_path=config.pool_file,
        router_path=config.router_file,
    )
    eval_specs = config.eval_dataset_specs()
    _require_datasets(eval_specs, "evaluation")
    out_dir = config.out_dir / "bench"
    steps = [
        ("speedup", bench.speedup),
        ("compare", bench.compare),
        ("heatmap", bench.heatmap),
        ("pool_size_ablation", bench.pool_size_ablation),
        ("training_loss_ablation", bench.training_loss_ablation),
        ("agreement", bench.agreement),
    ]

    if dry_run:
        plan = [f"{name}: {'run' if on else 'skip'}" for name, on in steps]
        print_plan([*plan, f"Write tables to {out_dir}"])
        return out_dir

    model = load_model(config.model_path)
    pool = CandidatePool.load(config.pool_file)
    router = load_router(config.router_file)
    tokenizer = _tokenizer(config)
    eval_pairs = _load_task_pairs(eval_specs, tokenizer)
    results: dict[str, pl.DataFrame | HeatmapTable] = {
        "load_estimates": _load_estimates(config.model_path, pool.k)
    }
    n_steps = len(steps)

    for i, (name, enabled) in enumerate(steps, start=1):
        if not enabled:
            print(f"\n[{i}/{n_steps}] SKIPPED: {name}")
            continue
        print(f"\n[{i}/{n_steps}] Running {name}...")
        match name:
            case "speedup":
                workload = synthetic_workload(
                    model.config.vocab_size,
                    bench.prompt_lengths,
                    2,
                    config.seed_for("bench"),
                )
                dense_store = BlockStore(config.model_path)
                routed_store = BlockStore(config.model_path)
                results["speedup"] = measure_speedup(
                    dense_store,
                    routed_store,
                    workload,
                    bench.gen_lengths,
                    router=router,
                    pool=pool,
                    repetitions=bench.repetitions,
                    use_cache=config.use_cache,
                )
            case "compare":
                calibration = _calibration_for(config, tokenizer, set(eval_pairs))
                table = compare_methods(
                    model,
                    pool,
                    router,
                    eval_pairs,
                    criterion=config.label_criterion,
                    metric=bench.metric,
                    calibration=calibration,
                )
                results["compare"] = table.to_frame()
                results["selection_time"] = table.timing_frame()
            case "heatmap":
                results["heatmap"] = compute_heatmap(
                    router, pool, eval_pairs, model.config.n_blocks
                )
            case "pool_size_ablation":
                datasets = _calibration_datasets(config, tokenizer, config.datasets)
                router_specs = config.router_dataset_specs()
                router_pairs = _load_task_pairs(router_specs, tokenizer)
                train_pairs = [p for pairs in router_pairs.values() for p in pairs]
                results["pool_size_ablation"] = ablate_pool_size(
                    model,
                    datasets,
                    config.criteria,
                    bench.pool_sizes,
                    pool.k,
                    train_pairs,
                    eval_pairs,
                    _train_config(config),
                    config.router,
                    config.seed_for("bench"),
                    config.label_criterion,
                )
            case "training_loss_ablation":
                require_paths(router_dataset_path=config.router_dataset_file)
                samples = load_router_dataset(config.router_dataset_file)
                train, val = split_samples(
                    samples, config.val_fraction, config.seed_for("split")
                )
                results["training_loss_ablation"] = ablate_training_loss(
                    train,
                    val,
                    _train_config(config),
                    config.router.with_vocab(model.config.vocab_size),
                    pool.fingerprint(),
                )
            case "agreement":
                results["agreement"] = _agreement_table(config, bench.agreement_models)
        print(f"[OK] {name}")

    written = emit_reports(results, out_dir)
    write_json(
        {"k": pool.k, "m": pool.m, "seed": config.seed, "reports": sorted(results)},
        out_dir / "manifest.json",
    )
    print(f"\n[OK] {len(written)} report files in {out_dir}")
    return out_dir


def _calibration_for(
    config: RunConfig, tokenizer: Tokenizer, task_names: set[str]
) -> dict[str, CalibrationDataset] | None:
    """Calibration data keyed by task, when every evaluation task has some."""
    by_name = {s.name: s for s in config.datasets}
    if not task_names <= set(by_name):
        logger.warning("Evaluation tasks lack calibration data; using evaluation pairs")
        return None
    specs = [s for s in config.datasets if s.name in task_names]
    return {ds.name: ds for ds in _calibration_datasets(config, tokenizer, specs)}


def _agreement_table(config: RunConfig, n_models: int) -> pl.DataFrame:
    tiny = ModelConfig(vocab_size=16, d_model=8, d_ff=16, n_blocks=6, max_seq_len=16)
    report = greedy_agreement(
        tiny, k=2, n_models=n_models, seed=config.seed_for("bench")
    )
    return pl.DataFrame(
        {
            "seed": [i.seed for i in report.instances],
            "greedy": [str(i.greedy) for i in report.instances],
            "exhaustive": [str(i.exhaustive) for i in report.instances],
            "greedy_loss": [i.greedy_loss for i in report.instances],
            "exhaustive_loss": [i.exhaustive_loss for i in report.instances],
            "agree": [i.greedy == i.exhaustive for i in report.instances],
        }
    )


# ==========================================================================
# TOY FIXTURE
# ==========================================================================
TOY_CALIBRATION_PAIRS = 16
TOY_ROUTER_PAIRS = 40
TOY_EVAL_PAIRS = 12
TOY_PROMPTS = 6

TOY_CONFIG = """\
# Synthetic task-dependent fixture written by `pudding toy`.
model_path = "model.pudw"
tokenizer = "ids"
prompts_path = "prompts.txt"
criteria = ["tl", "tld"]
k = {k}
calibration_samples = {calibration}
max_new_tokens = 4
seed = {seed}
out_dir = "out"

datasets = [
{calibration_specs}
]
router_datasets = [
{router_specs}
]
eval_datasets = [
{eval_specs}
]

[train]
learning_rate = 0.01
weight_decay = 0.0
batch_size = 16
epochs = 60
warmup_steps = 10

[router]
embed_dim = 16
n_layers = 0

[bench]
repetitions = 5
prompt_lengths = [4, 8]
gen_lengths = [1, 4]
pool_sizes = [1, 2, 4]
"""


def _spec_lines(names: list[str], suffix: str) -> str:
    return ",\n".join(
        f'    {{ name = "{name}", path = "data/{name}{suffix}.jsonl" }}'
        for name in names
    )


def cmd_toy(config: RunConfig, out_dir: Path, dry_run: bool = False) -> Path:
    """Write the synthetic fixture, its datasets and a pudding.toml."""
    banner("PUDDING: SYNTHETIC FIXTURE")
    target = out_dir / "pudding.toml"
    if dry_run:
        print_plan(
            [
                f"Build the task-dependent model and write {out_dir / 'model.pudw'}",
                f"Write calibration, router and evaluation pairs to {out_dir}/data",
                f"Write {out_dir / 'prompts.txt'} and {target}",
            ]
        )
        return target

    print("\n[1/3] Building fixture model...")
    fixture = build_task_dependent_fixture()
    model: TransformerModel = fixture.model
    save_model(model, out_dir / "model.pudw")
    print(f"[OK] {model.n_blocks} blocks, {len(fixture.tasks)} tasks")

    print("\n[2/3] Sampling task pairs...")
    seed = config.seed_for("toy")
    names = [task.name for task in fixture.tasks]
    splits = (
        ("", TOY_CALIBRATION_PAIRS),
        ("_train", TOY_ROUTER_PAIRS),
        ("_eval", TOY_EVAL_PAIRS),
    )
    per_task_prompts = TOY_PROMPTS // len(fixture.tasks)
    prompt_lines = []
    for t, task in enumerate(fixture.tasks):
        for offset, (suffix, n) in enumerate(splits):
            records = sample_task_pairs(task, n, seed + 10 * t + offset)
            target_file = out_dir / "data" / f"{task.name}{suffix}.jsonl"
            save_pairs(records_to_pairs(records), target_file)
        for record in sample_task_pairs(task, per_task_prompts, seed + 10 * t + 9):
            prompt_lines.append(" ".join(str(tok) for tok in record["prompt_tokens"]))
    prompts = "\n".join(prompt_lines) + "\n"
    (out_dir / "prompts.txt").write_text(prompts, encoding="utf-8")
    print(f"[OK] Datasets for {names}")

    print("\n[3/3] Writing config...")
    target.write_text(
        TOY_CONFIG.format(
            k=fixture.blocks_per_task,
            calibration=TOY_CALIBRATION_PAIRS,
            seed=config.seed,
            calibration_specs=_spec_lines(names, ""),
            router_specs=_spec_lines(names, "_train"),
            eval_specs=_spec_lines(names, "_eval"),
        ),
        encoding="utf-8",
    )
    print(f"[OK] Run `pudding search -c {target}` to start the pipeline")
    return target

