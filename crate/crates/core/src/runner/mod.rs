//! Experiment orchestration behind the command-line entry points.

mod config;
mod sweep;

pub use config::RunConfig;
pub use sweep::{cmd_sweep_distill, sweep_distill, SweepPoint, SweepResult};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{generate_synthetic, load_voc, write_voc, DataSplit, DatasetError, DatasetView};
use crate::detector::{infer_stem, relabel_detections, Checkpoint, DetectorError};
use crate::evaluation::{map_report, ApReport, DetectionResult, EvalError, Stage};
use crate::miner::{MinerError, PseudoStore};
use crate::oracle::{build_oracle, CachedOracle, EmbeddingOracle, OracleError, TextCache, CACHE_DIR_ENV};
use crate::registry::{build_schedule, IncrementalSchedule, RegistryError};
use crate::text_space::TextSpaceError;
use crate::trainer::{
    run_task_1, run_task_2, text_prior_mapping, StageContext, StemCache, Task1Output, Task2Output, Toggles,
    TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("data root {0} does not exist")]
    DataRoot(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("nothing to ablate: give at least one of text, broad, image")]
    NothingToAblate,
    #[error("sweep: {0}")]
    Sweep(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Store(#[from] MinerError),
    #[error(transparent)]
    TextSpace(#[from] TextSpaceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Stable machine-readable tag printed on failure.
    pub fn tag(&self) -> &'static str {
        match self {
            RunError::DataRoot(_) => "E_DATA_ROOT",
            RunError::Config(_) | RunError::Registry(_) => "E_CONFIG",
            RunError::NothingToAblate => "E_ABLATE",
            RunError::Sweep(_) => "E_SWEEP",
            RunError::Dataset(_) => "E_DATA",
            RunError::Train(TrainError::Diverged { .. }) => "E_DIVERGED",
            RunError::Train(TrainError::Config(_)) => "E_CONFIG",
            RunError::Train(_) => "E_TRAIN",
            RunError::Eval(_) => "E_EVAL",
            RunError::Oracle(_) => "E_ORACLE",
            RunError::Detector(_) => "E_MODEL",
            RunError::Store(_) => "E_STORE",
            RunError::TextSpace(_) => "E_TEXT",
            RunError::Io { .. } => "E_IO",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Train/test views plus their precomputed stems.
pub struct ExperimentData {
    pub trainval: DatasetView,
    pub test: DatasetView,
    pub stems: StemCache,
}

impl ExperimentData {
    pub fn from_views(trainval: DatasetView, test: DatasetView, cfg: &RunConfig) -> Result<Self, RunError> {
        let all: Vec<_> = trainval.records.iter().chain(&test.records).cloned().collect();
        let stems = StemCache::build(&all, &cfg.detector)?;
        Ok(Self { trainval, test, stems })
    }

    /// Loads the VOC-layout tree under `cfg.data_root`.
    pub fn load(cfg: &RunConfig, schedule: &IncrementalSchedule) -> Result<Self, RunError> {
        if !cfg.data_root.is_dir() {
            return Err(RunError::DataRoot(cfg.data_root.clone()));
        }
        let classes = schedule.registry.all_classes();
        let trainval = load_voc(&cfg.data_root, DataSplit::Trainval, &classes)?;
        let test = load_voc(&cfg.data_root, DataSplit::Test, &classes)?;
        Self::from_views(trainval, test, cfg)
    }
}

/// Oracle named by the config, wrapped in the on-disk text cache when
/// `CLIPIOD_CACHE_DIR` is set.
pub fn make_oracle(cfg: &RunConfig) -> Result<Box<dyn EmbeddingOracle>, RunError> {
    let inner = build_oracle(&cfg.oracle)?;
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) => {
            let cache = TextCache::open(Path::new(&dir))?;
            Ok(Box::new(CachedOracle::new(inner, cache)))
        }
        None => Ok(Box::new(inner)),
    }
}

pub fn schedule_for(cfg: &RunConfig) -> Result<IncrementalSchedule, RunError> {
    Ok(build_schedule(&cfg.setting, &cfg.broad_names)?)
}

/// Both trained stages and their reports.
pub struct RunOutcome {
    pub task1: Task1Output,
    pub task2: Task2Output,
    pub report_t1: ApReport,
    pub report_t2: ApReport,
}

fn context<'a>(
    cfg: &'a RunConfig,
    schedule: &'a IncrementalSchedule,
    data: &'a ExperimentData,
    oracle: &'a dyn EmbeddingOracle,
) -> StageContext<'a> {
    StageContext {
        schedule,
        oracle,
        oracle_config: &cfg.oracle,
        template: &cfg.template,
        toggles: cfg.toggles,
        train: &cfg.train,
        miner: &cfg.miner,
        detector: &cfg.detector,
        extra_names: if cfg.toggles.text { &cfg.extra_names } else { &[] },
        stems: &data.stems,
    }
}

/// Task 1 only, with its evaluation.
pub fn run_stage_one(
    cfg: &RunConfig,
    data: &ExperimentData,
    oracle: &dyn EmbeddingOracle,
) -> Result<(Task1Output, ApReport), RunError> {
    cfg.validate()?;
    let schedule = schedule_for(cfg)?;
    let ctx = context(cfg, &schedule, data, oracle);
    let store = match &cfg.pseudo_store {
        Some(p) => Some(PseudoStore::load(p)?),
        None => None,
    };
    let t1 = run_task_1(&ctx, &data.trainval, store)?;
    let report = evaluate_task1(cfg, &schedule, &t1.checkpoint, data, oracle)?;
    Ok((t1, report))
}

/// Task 2 from a finished task 1, with its evaluation.
pub fn run_stage_two(
    cfg: &RunConfig,
    data: &ExperimentData,
    oracle: &dyn EmbeddingOracle,
    t1: &Task1Output,
) -> Result<(Task2Output, ApReport), RunError> {
    let schedule = schedule_for(cfg)?;
    let ctx = context(cfg, &schedule, data, oracle);
    let t2 = run_task_2(&ctx, &t1.checkpoint, &data.trainval, &t1.rehearsal)?;
    let report = evaluate_task2(cfg, &schedule, &t2.checkpoint, data)?;
    Ok((t2, report))
}

/// Task 1, task 2 and both reports, entirely in memory.
pub fn run_experiment(
    cfg: &RunConfig,
    data: &ExperimentData,
    oracle: &dyn EmbeddingOracle,
) -> Result<RunOutcome, RunError> {
    let (task1, report_t1) = run_stage_one(cfg, data, oracle)?;
    let (task2, report_t2) = run_stage_two(cfg, data, oracle, &task1)?;
    Ok(RunOutcome { task1, task2, report_t1, report_t2 })
}

fn detect_all(
    cfg: &RunConfig,
    ck: &Checkpoint,
    bank: &crate::text_space::TextEmbeddingBank,
    data: &ExperimentData,
) -> Result<Vec<DetectionResult>, RunError> {
    let mut dets = Vec::new();
    for r in &data.test.records {
        let p = data.stems.get(&r.image_id)?;
        dets.extend(infer_stem(&ck.state, bank, &p.stem, &p.frame, &r.image_id, cfg.score_threshold, cfg.eval_nms_iou)?);
    }
    Ok(dets)
}

/// Task 1 evaluation over base and novel classes. Novel names can only come
/// from text rows (zero-shot) or from broad rows relabelled by the text-prior
/// mapping; extra rows are dropped.
pub fn evaluate_task1(
    cfg: &RunConfig,
    schedule: &IncrementalSchedule,
    ck: &Checkpoint,
    data: &ExperimentData,
    oracle: &dyn EmbeddingOracle,
) -> Result<ApReport, RunError> {
    let reg = &schedule.registry;
    let mut bank = ck.bank.clone();
    if cfg.toggles.text {
        let prompts: Vec<String> = reg.novel_names.iter().map(|n| cfg.template.apply(n)).collect();
        let rows = oracle.embed_texts(&prompts)?;
        // novel rows go before any extras so `names` stays a prefix of the rows
        let split = bank.names.len();
        let extras = bank.rows.split_off(split);
        bank.names.extend(reg.novel_names.iter().cloned());
        bank.rows.extend(rows.into_iter().map(|e| e.values));
        bank.rows.extend(extras);
    }
    let mut rename: BTreeMap<String, Option<String>> =
        bank.extra_names.iter().map(|n| (n.clone(), None)).collect();
    let mut note = String::from("novel AP from ");
    note.push_str(if cfg.toggles.text { "zero-shot novel text rows" } else { "no novel rows" });
    if bank.names.iter().any(|n| reg.is_broad(n)) {
        let prior = text_prior_mapping(&reg.novel_names, &reg.broad_names, &cfg.template, oracle)?;
        for b in &reg.broad_names {
            rename.insert(b.clone(), prior.novel_for(b).map(str::to_string));
        }
        let pairs: Vec<String> = prior.pairs.iter().map(|(n, b)| format!("{b}->{n}")).collect();
        let _ = write!(note, " and broad detections relabelled by text similarity ({})", pairs.join(", "));
    }
    let dets = relabel_detections(detect_all(cfg, ck, &bank, data)?, &rename, cfg.eval_nms_iou);
    Ok(map_report(&dets, &data.test.ground_truth(), reg, Stage::Task1, cfg.ap_mode, &note)?)
}

/// Task 2 evaluation over base and novel classes; unmapped broad rows and
/// extras are dropped.
pub fn evaluate_task2(
    cfg: &RunConfig,
    schedule: &IncrementalSchedule,
    ck: &Checkpoint,
    data: &ExperimentData,
) -> Result<ApReport, RunError> {
    let reg = &schedule.registry;
    let rename: BTreeMap<String, Option<String>> = ck
        .bank
        .row_names()
        .filter(|n| !reg.is_base(n) && !reg.is_novel(n))
        .map(|n| (n.clone(), None))
        .collect();
    let note = match &ck.mapping {
        Some(m) => {
            let pairs: Vec<String> = m.pairs.iter().map(|(n, b)| format!("{b}->{n}")).collect();
            format!("category mapping {}", pairs.join(", "))
        }
        None => String::new(),
    };
    let dets = relabel_detections(detect_all(cfg, ck, &ck.bank, data)?, &rename, cfg.eval_nms_iou);
    Ok(map_report(&dets, &data.test.ground_truth(), reg, Stage::Task2, cfg.ap_mode, &note)?)
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn metrics_jsonl(out: &RunOutcome) -> String {
    let mut s = String::new();
    for m in out.task1.metrics.iter().chain(&out.task2.metrics) {
        s.push_str(&serde_json::to_string(m).expect("metric record"));
        s.push('\n');
    }
    s
}

/// Writes checkpoints, store, metrics, rehearsal list, reports and the
/// resolved config under `dir`. Returns the written paths.
pub fn write_artifacts(cfg: &RunConfig, out: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = |name: &str| dir.join(name);
    let mut written = Vec::new();
    for (name, ck) in [("task1.ckpt.json", &out.task1.checkpoint), ("task2.ckpt.json", &out.task2.checkpoint)] {
        ck.save(&p(name))?;
        written.push(p(name));
    }
    out.task1.store.persist(&p("pseudo_store.tsv"))?;
    written.push(p("pseudo_store.tsv"));
    let files = [
        ("metrics.jsonl", metrics_jsonl(out)),
        ("rehearsal.json", serde_json::to_string_pretty(&out.task1.rehearsal).expect("rehearsal")),
        ("report_t1.txt", out.report_t1.to_table()),
        ("report_t1.jsonl", out.report_t1.to_jsonl()),
        ("report_t2.txt", out.report_t2.to_table()),
        ("report_t2.jsonl", out.report_t2.to_jsonl()),
        ("config.toml", cfg.to_toml_string()?),
    ];
    for (name, text) in files {
        write(&p(name), &text)?;
        written.push(p(name));
    }
    Ok(written)
}

/// Loads data from `cfg.data_root`, runs both tasks and writes every artifact
/// under `cfg.out_dir`.
pub fn execute_run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let schedule = schedule_for(cfg)?;
    let data = ExperimentData::load(cfg, &schedule)?;
    let oracle = make_oracle(cfg)?;
    let out = run_experiment(cfg, &data, oracle.as_ref())?;
    write_artifacts(cfg, &out, &cfg.out_dir)?;
    Ok(out)
}

/// `run`: the config file at `path`, unmodified.
pub fn cmd_run(path: &Path) -> Result<RunOutcome, RunError> {
    execute_run(&RunConfig::load(path)?)
}

/// Generates the synthetic dataset described by `cfg` into `cfg.data_root`.
pub fn prepare_data(cfg: &RunConfig) -> Result<(usize, usize), RunError> {
    let syn = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| RunError::Config("prepare-data needs a [synthetic] section".into()))?;
    let ds = generate_synthetic(syn)?;
    write_voc(&ds.trainval, &cfg.data_root)?;
    write_voc(&ds.test, &cfg.data_root)?;
    Ok((ds.trainval.len(), ds.test.len()))
}

/// `eval`: re-evaluates a saved checkpoint on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, stage: Stage) -> Result<ApReport, RunError> {
    let schedule = schedule_for(cfg)?;
    let data = ExperimentData::load(cfg, &schedule)?;
    let ck = Checkpoint::load(checkpoint)?;
    match stage {
        Stage::Task1 => {
            let oracle = make_oracle(cfg)?;
            evaluate_task1(cfg, &schedule, &ck, &data, oracle.as_ref())
        }
        Stage::Task2 => evaluate_task2(cfg, &schedule, &ck, &data),
    }
}

/// The four method rows compared by the ablation.
pub const ABLATION_ROWS: [Toggles; 4] = [
    Toggles { text: true, broad: false, image: false },
    Toggles { text: true, broad: true, image: false },
    Toggles { text: false, broad: false, image: true },
    Toggles::FULL,
];

/// Base/novel/all mAP (in points) for both stages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageScores {
    pub base: f64,
    pub novel: f64,
    pub all: f64,
}

impl StageScores {
    pub fn of(r: &ApReport) -> Self {
        Self { base: r.map_base * 100.0, novel: r.map_novel * 100.0, all: r.map_all * 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub t1: StageScores,
    pub t2: StageScores,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:^5} {:^5} {:^5} | {:^23} | {:^23}", "text", "broad", "image", "T1", "T2");
        let _ = writeln!(
            s,
            "{:5} {:5} {:5} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7}",
            "", "", "", "base", "novel", "all", "base", "novel", "all"
        );
        let mark = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:^5} {:^5} {:^5} | {:>7.2} {:>7.2} {:>7.2} | {:>7.2} {:>7.2} {:>7.2}",
                mark(r.toggles.text),
                mark(r.toggles.broad),
                mark(r.toggles.image),
                r.t1.base,
                r.t1.novel,
                r.t1.all,
                r.t2.base,
                r.t2.novel,
                r.t2.all
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("text,broad,image,t1_base,t1_novel,t1_all,t2_base,t2_novel,t2_all\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.toggles.text, r.toggles.broad, r.toggles.image, r.t1.base, r.t1.novel, r.t1.all, r.t2.base,
                r.t2.novel, r.t2.all
            );
        }
        s
    }

    pub fn row(&self, t: Toggles) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.toggles == t)
    }
}

/// Row configurations for an ablation over the named switches. Switches not
/// named keep the base config's value; duplicate rows collapse.
pub fn ablation_configs(base: &RunConfig, toggles: &[String]) -> Result<Vec<RunConfig>, RunError> {
    if toggles.is_empty() {
        return Err(RunError::NothingToAblate);
    }
    for t in toggles {
        if !matches!(t.as_str(), "text" | "broad" | "image") {
            return Err(RunError::Config(format!("unknown toggle {t:?} (expected text, broad or image)")));
        }
    }
    let has = |n: &str| toggles.iter().any(|t| t == n);
    let mut out: Vec<RunConfig> = Vec::new();
    for row in ABLATION_ROWS {
        let t = Toggles {
            text: if has("text") { row.text } else { base.toggles.text },
            broad: if has("broad") { row.broad } else { base.toggles.broad },
            image: if has("image") { row.image } else { base.toggles.image },
        };
        if out.iter().any(|c| c.toggles == t) {
            continue;
        }
        let mut c = base.clone();
        c.toggles = t;
        c.out_dir = base.out_dir.join("ablate").join(t.label());
        out.push(c);
    }
    Ok(out)
}

/// Runs `exec` on each config, `parallel` at a time, preserving order.
pub fn run_many<T: Send>(
    configs: &[RunConfig],
    parallel: usize,
    exec: &(dyn Fn(&RunConfig) -> Result<T, RunError> + Sync),
) -> Result<Vec<T>, RunError> {
    let parallel = parallel.max(1);
    let mut results: Vec<Option<Result<T, RunError>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_cfg, chunk_out) in configs.chunks(parallel).zip(results.chunks_mut(parallel)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_cfg.iter().map(|c| s.spawn(move || exec(c))).collect();
            for (h, slot) in handles.into_iter().zip(chunk_out.iter_mut()) {
                *slot = Some(h.join().expect("run thread panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Ablation table from per-config executions returning (T1, T2) reports.
pub fn ablate_with(
    base: &RunConfig,
    toggles: &[String],
    parallel: usize,
    exec: &(dyn Fn(&RunConfig) -> Result<(ApReport, ApReport), RunError> + Sync),
) -> Result<AblationTable, RunError> {
    let configs = ablation_configs(base, toggles)?;
    let reports = run_many(&configs, parallel, exec)?;
    Ok(AblationTable {
        rows: configs
            .iter()
            .zip(reports)
            .map(|(c, (r1, r2))| AblationRow { toggles: c.toggles, t1: StageScores::of(&r1), t2: StageScores::of(&r2) })
            .collect(),
    })
}

/// `ablate`: one full run per row, artifacts under `out_dir/ablate/<row>`,
/// table written to `out_dir/ablation.txt` and `.csv`.
pub fn cmd_ablate(base: &RunConfig, toggles: &[String], parallel: usize) -> Result<AblationTable, RunError> {
    base.validate()?;
    let schedule = schedule_for(base)?;
    let data = ExperimentData::load(base, &schedule)?;
    let oracle = make_oracle(base)?;
    let exec = |c: &RunConfig| -> Result<(ApReport, ApReport), RunError> {
        let out = run_experiment(c, &data, oracle.as_ref())?;
        write_artifacts(c, &out, &c.out_dir)?;
        Ok((out.report_t1, out.report_t2))
    };
    let table = ablate_with(base, toggles, parallel, &exec)?;
    std::fs::create_dir_all(&base.out_dir).map_err(io_err(&base.out_dir))?;
    write(&base.out_dir.join("ablation.txt"), &table.to_table())?;
    write(&base.out_dir.join("ablation.csv"), &table.to_csv())?;
    Ok(table)
}
