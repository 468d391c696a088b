//! One function per pipeline stage. Every stage reads its inputs from the
//! workdir, writes its outputs there, and appends a manifest entry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ex2_core::augment::{
    augment, compute_targets, gold_train_members, mix_augmented, slice_context, train_slice_sizes, upsample_baseline,
    AugmentError, AugmentPlan, AugmentReport, GenerationSettings,
};
use ex2_core::backend::{GenerationBackend, OracleBackend, OraclePool, RemoteBackend, StubBackend};
use ex2_core::codec::{encode_student, encode_target, AnonymizationMode, SliceContext, StudentTask};
use ex2_core::dataset::{
    load_dataset, load_partitioned, read_json, slice_dataset, write_dataset, Dataset, DatasetFormat, Example,
    Partition, SliceIndex, SplitAssignment,
};
use ex2_core::metrics::{evaluate, evaluate_with, train_reference_student, EvalReport};
use ex2_core::protocol::{apply_fold, make_crossval_plan, write_fold, CrossValPlan, Fold};
use ex2_core::review::{Decision, ReviewSession};
use ex2_core::seed::derive_seed;
use ex2_core::teacher::{build_dev_corpus, build_teacher_corpus, write_teacher_corpus, TeacherConfig};
use serde::Serialize;

use crate::config::{BackendConfig, PipelineConfig};
use crate::exit::Failure;
use crate::workdir::Workdir;

pub type StageResult<T = ()> = Result<T, Failure>;

/// Training-set conditions compared downstream.
pub const CONDITIONS: [&str; 3] = ["baseline", "upsampled", "ex2"];

pub struct Ctx {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub wd: Workdir,
    pub force: bool,
    pub strict: bool,
    pub fold: Option<String>,
    pub quiet: bool,
}

/// Everything a per-fold stage needs, rebuilt from the truncate outputs.
struct FoldState {
    id: String,
    dir: PathBuf,
    dataset: Dataset,
    index: SliceIndex,
    split: SplitAssignment,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_examples<'a>(path: &Path, examples: impl IntoIterator<Item = &'a Example>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(write_dataset(path, examples)?)
}

/// Fold ids become directory names.
pub fn fold_dir_name(fold_id: &str) -> String {
    fold_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl Ctx {
    fn out(&self, text: impl AsRef<str>) {
        if !self.quiet {
            print!("{}", text.as_ref());
        }
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.config.seed, &[stage])
    }

    fn begin(&self, stage: &str, fold: Option<&str>) -> StageResult {
        self.wd.check_config(stage, fold, &self.config_hash, self.force)
    }

    fn record(&self, stage: &str, fold: Option<&str>, inputs: &[PathBuf], outputs: &[PathBuf]) -> StageResult {
        let inputs: Vec<PathBuf> = inputs.iter().filter(|p| p.is_file()).cloned().collect();
        self.wd.record(stage, fold, &self.config_hash, &inputs, outputs)?;
        log::info!("{stage}{}: wrote {} file(s)", fold.map(|f| format!(" [{f}]")).unwrap_or_default(), outputs.len());
        Ok(())
    }

    fn dataset_inputs(&self) -> Vec<PathBuf> {
        let d = &self.config.dataset;
        if d.is_dir() {
            Partition::ALL.iter().map(|p| d.join(p.file_name())).collect()
        } else {
            vec![d.clone()]
        }
    }

    fn load_source(&self) -> StageResult<(Dataset, BTreeMap<String, Partition>)> {
        load_partitioned(&self.config.dataset)
            .with_context(|| format!("loading dataset {}", self.config.dataset.display()))
            .map_err(Failure::validation)
    }

    fn plan(&self) -> StageResult<CrossValPlan> {
        let path = self.wd.path("crossval.json");
        self.wd.require(&[path.clone()], "slice")?;
        Ok(read_json(&path).context("reading crossval.json")?)
    }

    /// Folds to operate on: `--fold`, or every fold when `all` is set, or
    /// the only fold.
    pub fn folds(&self, all: bool) -> StageResult<Vec<Fold>> {
        let plan = self.plan()?;
        if let Some(id) = &self.fold {
            return Ok(vec![plan.fold(id).map_err(|e| Failure::validation(e.into()))?.clone()]);
        }
        if all || plan.folds.len() == 1 {
            return Ok(plan.folds);
        }
        let ids: Vec<&str> = plan.folds.iter().map(|f| f.fold_id.as_str()).collect();
        Err(Failure::validation(anyhow!(
            "{} folds in crossval.json; pick one with --fold ({})",
            ids.len(),
            ids.join(", ")
        )))
    }

    fn fold_dir(&self, fold_id: &str) -> PathBuf {
        self.wd.path(&format!("folds/{}", fold_dir_name(fold_id)))
    }

    fn fold_state(&self, fold: &Fold) -> StageResult<FoldState> {
        let dir = self.fold_dir(&fold.fold_id);
        self.wd.require(&[dir.join("split.json"), dir.join("train.jsonl")], "truncate")?;
        let (dataset, _) = load_partitioned(&dir).context("loading fold dataset")?;
        let split: SplitAssignment = read_json(&dir.join("split.json")).context("reading split.json")?;
        let index = slice_dataset(&dataset, &self.config.slicing).map_err(|e| Failure::validation(e.into()))?;
        Ok(FoldState {
            id: fold.fold_id.clone(),
            dir,
            dataset,
            index,
            split,
        })
    }

    fn fold_files(state: &FoldState) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = Partition::ALL.iter().map(|p| state.dir.join(p.file_name())).collect();
        files.push(state.dir.join("split.json"));
        files
    }

    fn augment_plan(&self, state: &FoldState) -> StageResult<AugmentPlan> {
        let sizes = train_slice_sizes(&state.dataset, &state.index, &state.split);
        let mut plan = compute_targets(&sizes, &state.split, self.config.augment.policy).map_err(|e| Failure::validation(e.into()))?;
        plan.per_request_samples = self.config.augment.per_request_samples;
        plan.max_attempts_factor = self.config.augment.max_attempts_factor;
        plan.dedup = self.config.augment.dedup;
        plan.validate().map_err(|e| Failure::validation(e.into()))?;
        Ok(plan)
    }

    fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            seed: self.seed("teacher"),
            ..self.config.teacher.clone()
        }
    }
}

pub fn slice(ctx: &Ctx) -> StageResult {
    ctx.begin("slice", None)?;
    let (dataset, _) = ctx.load_source()?;
    let index = slice_dataset(&dataset, &ctx.config.slicing).map_err(|e| Failure::validation(e.into()))?;
    let protocol = &ctx.config.protocol;
    let truncate_to = protocol.truncate_to.unwrap_or(ctx.config.teacher.k);
    let seed = ctx.seed("truncate");
    let plan = match &protocol.few_shot {
        Some(few) => {
            if truncate_to == 0 {
                return Err(Failure::validation(anyhow!("protocol.truncate_to must be at least 1")));
            }
            if let Some(unknown) = few.iter().find(|s| !index.slices.contains_key(*s)) {
                let known: Vec<&str> = index.slice_ids().collect();
                return Err(Failure::validation(anyhow!(
                    "few-shot slice {unknown:?} does not exist; slices are: {}",
                    known.join(", ")
                )));
            }
            CrossValPlan {
                folds: vec![Fold {
                    fold_id: "main".into(),
                    few_shot_slice_ids: few.clone(),
                }],
                truncate_to,
                strategy: protocol.strategy,
                seed,
            }
        }
        None => make_crossval_plan(&dataset, &index, &protocol.mode, truncate_to, protocol.strategy, seed)
            .map_err(|e| Failure::validation(e.into()))?,
    };

    let slices_path = ctx.wd.path("slices.json");
    fs::write(&slices_path, index.to_canonical_json() + "\n").context("writing slices.json")?;
    let plan_path = ctx.wd.path("crossval.json");
    write_json(&plan_path, &plan)?;
    if !index.unmatched.is_empty() {
        log::warn!("{} example(s) matched no slicing rule", index.unmatched.len());
    }
    let mut summary = format!("{} slices, {} fold(s)\n", index.slices.len(), plan.folds.len());
    for (slice, size) in &index.sizes {
        let _ = writeln!(summary, "  {slice:<24} {size:>6}  prior {:.4}", index.prior[slice]);
    }
    ctx.out(summary);
    ctx.record("slice", None, &ctx.dataset_inputs(), &[slices_path, plan_path])
}

pub fn truncate(ctx: &Ctx, fold: &Fold) -> StageResult {
    let f = Some(fold.fold_id.as_str());
    ctx.begin("truncate", f)?;
    let plan = ctx.plan()?;
    let (dataset, partition) = ctx.load_source()?;
    let index = slice_dataset(&dataset, &ctx.config.slicing).map_err(|e| Failure::validation(e.into()))?;
    let data = apply_fold(&dataset, &index, &partition, &plan, fold).map_err(|e| Failure::validation(e.into()))?;
    let dir = ctx.fold_dir(&fold.fold_id);
    write_fold(&dir, &data).context("writing fold")?;
    let trunc_path = dir.join("truncation.json");
    write_json(&trunc_path, &data.truncation)?;
    for (slice, t) in &data.truncation {
        log::info!("{slice}: kept {}, dropped {}", t.kept.len(), t.dropped_count);
    }
    let mut outputs: Vec<PathBuf> = Partition::ALL.iter().map(|p| dir.join(p.file_name())).collect();
    outputs.extend([dir.join("split.json"), trunc_path]);
    let mut inputs = ctx.dataset_inputs();
    inputs.push(ctx.wd.path("crossval.json"));
    ctx.record("truncate", f, &inputs, &outputs)
}

pub fn build_teacher(ctx: &Ctx, fold: &Fold) -> StageResult {
    let f = Some(fold.fold_id.as_str());
    ctx.begin("build-teacher", f)?;
    let state = ctx.fold_state(fold)?;
    let cfg = ctx.teacher_config();
    let teacher_err = |e: ex2_core::teacher::TeacherError| Failure::validation(e.into());
    let train = build_teacher_corpus(&state.dataset, &state.index, &state.split, &cfg).map_err(teacher_err)?;
    let dev = build_dev_corpus(&state.dataset, &state.index, &state.split, &cfg).map_err(teacher_err)?;
    let dir = state.dir.join("teacher");
    fs::create_dir_all(&dir).context("creating teacher dir")?;
    let (train_path, dev_path) = (dir.join("train.jsonl"), dir.join("dev.jsonl"));
    write_teacher_corpus(&train, &train_path).map_err(teacher_err)?;
    write_teacher_corpus(&dev, &dev_path).map_err(teacher_err)?;
    ctx.out(format!("teacher corpus: {} train, {} dev instances\n", train.len(), dev.len()));
    ctx.record("build-teacher", f, &Ctx::fold_files(&state), &[train_path, dev_path])
}

fn make_backend(ctx: &Ctx, state: &FoldState) -> StageResult<Box<dyn GenerationBackend>> {
    let seed = ctx.seed("backend");
    Ok(match &ctx.config.backend {
        BackendConfig::Stub => Box::new(StubBackend::new(seed)),
        BackendConfig::Oracle { pool } => {
            let pool_data = load_dataset(pool, DatasetFormat::Jsonl)
                .with_context(|| format!("loading oracle pool {}", pool.display()))
                .map_err(Failure::validation)?;
            let pool_index = slice_dataset(&pool_data, &ctx.config.slicing).map_err(|e| Failure::validation(e.into()))?;
            let mode = ctx.config.teacher.mode;
            let pools = state
                .split
                .slices_of(ex2_core::dataset::SplitKind::FewShot)
                .map(|slice| {
                    let gold = gold_train_members(&state.dataset, &state.index, &state.split, slice);
                    let context = slice_context(&state.index, slice, &gold);
                    let hidden: Vec<&Example> = pool_index.members(slice).iter().filter_map(|id| pool_data.get(id)).collect();
                    (slice.to_string(), OraclePool::from_examples(hidden, mode, &context))
                })
                .collect();
            Box::new(OracleBackend::new(pools, seed))
        }
        BackendConfig::Remote { .. } => {
            let cfg = ctx.config.backend.remote_config().map_err(Failure::validation)?;
            let backend = RemoteBackend::new(&cfg).map_err(|e| Failure::backend(e.into()))?;
            if !backend.health() {
                log::warn!("generation service at {} did not report healthy", backend.base_url());
            }
            Box::new(backend)
        }
    })
}

fn report_table(report: &AugmentReport) -> String {
    let mut out = format!(
        "{:<24} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}  status\n",
        "slice", "requested", "accepted", "rejected", "dedup", "overflow", "shortfall"
    );
    for (slice, row) in &report.slices {
        let _ = writeln!(
            out,
            "{slice:<24} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}  {}",
            row.requested,
            row.accepted,
            row.rejected(),
            row.dedup_dropped,
            row.overflow,
            row.shortfall,
            serde_json::to_value(row.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        );
    }
    out
}

/// Returns the total shortfall.
pub fn augment_stage(ctx: &Ctx, fold: &Fold) -> StageResult<usize> {
    let f = Some(fold.fold_id.as_str());
    ctx.begin("augment", f)?;
    let state = ctx.fold_state(fold)?;
    let plan = ctx.augment_plan(&state)?;
    let dir = state.dir.join("augment");
    let (syn_path, report_path) = (dir.join("synthetic.jsonl"), dir.join("report.json"));
    let plan_path = dir.join("plan.json");

    let total_deficit: usize = plan.targets.values().map(|t| t.deficit()).sum();
    let (synthetic, report) = if total_deficit == 0 {
        ctx.out("nothing to synthesize: every few-shot slice already meets its target\n");
        let slices = plan
            .targets
            .iter()
            .map(|(s, t)| {
                let row = serde_json::json!({
                    "requested": 0, "requests": 0, "generated": 0, "parse_rejected": {},
                    "dedup_dropped": 0, "overflow": 0, "accepted": 0, "shortfall": 0, "status": "skipped"
                });
                log::info!("{s}: {} train examples, target {}", t.current, t.target);
                (s.clone(), serde_json::from_value(row).expect("static row"))
            })
            .collect();
        (
            Vec::new(),
            AugmentReport {
                backend_id: ctx.config.backend.name().to_string(),
                wall_clock_ms: 0,
                slices,
            },
        )
    } else {
        let backend = make_backend(ctx, &state)?;
        let settings = GenerationSettings {
            k: ctx.config.teacher.k,
            mode: ctx.config.teacher.mode,
            seed: ctx.seed("augment"),
            temperature: ctx.config.augment.temperature,
            max_length: ctx.config.augment.max_length,
        };
        augment(&state.dataset, &state.index, &state.split, &plan, backend.as_ref(), &settings).map_err(|e| match e {
            AugmentError::Backend { .. } => Failure::backend(e.into()),
            other => Failure::validation(other.into()),
        })?
    };
    log::info!("augmentation took {} ms", report.wall_clock_ms);

    write_examples(&syn_path, &synthetic)?;
    write_json(&plan_path, &plan)?;
    // wall-clock time varies run to run; keep it out of the artifact
    let mut stored = serde_json::to_value(&report).context("serializing report")?;
    if let Some(map) = stored.as_object_mut() {
        map.remove("wall_clock_ms");
    }
    write_json(&report_path, &stored)?;
    ctx.out(report_table(&report));
    ctx.record("augment", f, &Ctx::fold_files(&state), &[syn_path, plan_path, report_path])?;
    Ok(report.total_shortfall())
}

fn slice_contexts(state: &FoldState, synthetic: &[Example], slicing: &ex2_core::dataset::SlicingConfig) -> StageResult<BTreeMap<String, SliceContext>> {
    let syn = Dataset::from_examples(synthetic.to_vec()).context("synthetic examples")?;
    let syn_index = slice_dataset(&syn, slicing).map_err(|e| Failure::validation(e.into()))?;
    let mut contexts = BTreeMap::new();
    for slice in syn_index.slice_ids() {
        let gold = gold_train_members(&state.dataset, &state.index, &state.split, slice);
        let context = slice_context(&state.index, slice, &gold);
        for id in syn_index.members(slice) {
            contexts.entry(id.clone()).or_insert_with(|| context.clone());
        }
    }
    Ok(contexts)
}

/// Interactive accept/reject/edit loop over stdin; decisions are journaled
/// as they are made, so an interrupted session resumes where it stopped.
pub fn review(ctx: &Ctx, fold: &Fold, input: &mut dyn BufRead, output: &mut dyn std::io::Write) -> StageResult {
    let f = Some(fold.fold_id.as_str());
    ctx.begin("review", f)?;
    let state = ctx.fold_state(fold)?;
    let syn_path = state.dir.join("augment/synthetic.jsonl");
    ctx.wd.require(&[syn_path.clone()], "augment")?;
    let synthetic = load_dataset(&syn_path, DatasetFormat::Jsonl).context("loading synthetic examples")?.into_examples();
    let contexts = slice_contexts(&state, &synthetic, &ctx.config.slicing)?;
    let dir = state.dir.join("review");
    fs::create_dir_all(&dir).context("creating review dir")?;
    let journal = dir.join("journal.jsonl");
    let mut session = ReviewSession::open(&journal).context("opening review journal")?;
    if !journal.exists() {
        fs::write(&journal, "").context("creating review journal")?;
    }
    let pending = session.pending(&synthetic);
    let total = pending.len();
    let fallback = SliceContext::from_examples(BTreeMap::new(), std::iter::empty());

    'outer: for (n, example) in pending.into_iter().enumerate() {
        let context = contexts.get(&example.id).unwrap_or(&fallback);
        let shown = encode_target(example, AnonymizationMode::SlotNames, context).unwrap_or_else(|_| example.text.clone());
        let labels: Vec<String> = example.labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(output, "[{}/{total}] {} ({})\n  {shown}", n + 1, example.id, labels.join(", "));
        loop {
            let _ = write!(output, "(a)ccept (r)eject (e)dit (q)uit > ");
            let _ = output.flush();
            let mut line = String::new();
            if input.read_line(&mut line).context("reading stdin")? == 0 {
                break 'outer;
            }
            let decision = match line.trim() {
                "a" => Decision::Accept,
                "r" => Decision::Reject,
                "q" => break 'outer,
                "e" => {
                    let _ = write!(output, "new markup > ");
                    let _ = output.flush();
                    let mut edit = String::new();
                    if input.read_line(&mut edit).context("reading stdin")? == 0 {
                        break 'outer;
                    }
                    Decision::Edit(edit.trim_end_matches(['\n', '\r']).to_string())
                }
                other => {
                    let _ = writeln!(output, "unknown choice {other:?}");
                    continue;
                }
            };
            match session.record(example, &decision, context).context("writing journal")? {
                Ok(()) => break,
                Err(invalid) => {
                    let _ = writeln!(output, "{invalid}; try again");
                }
            }
        }
    }

    let curated = session.curated(&synthetic);
    let curated_path = dir.join("curated.jsonl");
    write_examples(&curated_path, &curated)?;
    let remaining = session.pending(&synthetic).len();
    ctx.out(format!("{} curated, {remaining} still pending\n", curated.len()));
    let mut inputs = Ctx::fold_files(&state);
    inputs.push(syn_path);
    ctx.record("review", f, &inputs, &[journal, curated_path])
}

pub fn mix(ctx: &Ctx, fold: &Fold, curated: bool) -> StageResult {
    let f = Some(fold.fold_id.as_str());
    ctx.begin("mix", f)?;
    let state = ctx.fold_state(fold)?;
    let syn_path = if curated {
        let p = state.dir.join("review/curated.jsonl");
        ctx.wd.require(&[p.clone()], "review")?;
        p
    } else {
        let p = state.dir.join("augment/synthetic.jsonl");
        ctx.wd.require(&[p.clone()], "augment")?;
        p
    };
    let synthetic = load_dataset(&syn_path, DatasetFormat::Jsonl).context("loading synthetic examples")?.into_examples();
    let plan = ctx.augment_plan(&state)?;
    let train = |d: &Dataset| -> Vec<Example> {
        d.iter()
            .filter(|e| state.split.partition_of(&e.id) == Partition::Train)
            .cloned()
            .collect()
    };
    let upsampled = upsample_baseline(&state.dataset, &state.index, &state.split, &plan, ctx.seed("upsample"))
        .map_err(|e| Failure::validation(e.into()))?;
    let ex2 = mix_augmented(&state.dataset, &synthetic).map_err(|e| Failure::validation(e.into()))?;
    let dir = state.dir.join("mixed");
    let mut outputs = Vec::new();
    for (cond, data) in [("baseline", &state.dataset), ("upsampled", &upsampled), ("ex2", &ex2)] {
        let path = dir.join(format!("{cond}.jsonl"));
        let rows = train(data);
        write_examples(&path, &rows)?;
        ctx.out(format!("{cond:<10} {:>7} train examples\n", rows.len()));
        outputs.push(path);
    }
    let mut inputs = Ctx::fold_files(&state);
    inputs.push(syn_path);
    ctx.record("mix", f, &inputs, &outputs)
}

#[derive(Serialize)]
struct StudentRow<'a> {
    id: &'a str,
    input: String,
    target: String,
}

fn load_condition(state: &FoldState, cond: &str) -> StageResult<(Dataset, SplitAssignment)> {
    let path = state.dir.join(format!("mixed/{cond}.jsonl"));
    let train = load_dataset(&path, DatasetFormat::Jsonl).with_context(|| format!("loading {cond} train set"))?;
    let mut dataset = Dataset::new();
    let mut split = state.split.clone();
    for e in train.into_examples() {
        split.partition.insert(e.id.clone(), Partition::Train);
        dataset.push(e).context("merging condition")?;
    }
    for e in state.dataset.iter().filter(|e| state.split.partition_of(&e.id) != Partition::Train) {
        dataset.push(e.clone()).context("merging condition")?;
    }
    Ok((dataset, split))
}

fn mixed_files(ctx: &Ctx, state: &FoldState) -> StageResult<Vec<PathBuf>> {
    let files: Vec<PathBuf> = CONDITIONS.iter().map(|c| state.dir.join(format!("mixed/{c}.jsonl"))).collect();
    ctx.wd.require(&files, "mix")?;
    Ok(files)
}

pub fn export_student(ctx: &Ctx, fold: &Fold) -> StageResult {
    let f = Some(fold.fold_id.as_str());
    ctx.begin("export-student", f)?;
    let state = ctx.fold_state(fold)?;
    let mut inputs = mixed_files(ctx, &state)?;
    inputs.extend(Ctx::fold_files(&state));
    let task = ctx.config.task;
    let mut outputs = Vec::new();
    for cond in CONDITIONS {
        let (dataset, split) = load_condition(&state, cond)?;
        for part in Partition::ALL {
            let path = state.dir.join(format!("student/{cond}/{}", part.file_name()));
            fs::create_dir_all(path.parent().expect("has parent")).context("creating student dir")?;
            let mut text = String::new();
            for e in dataset.iter().filter(|e| split.partition_of(&e.id) == part) {
                let (input, target) = encode_student(e, task).map_err(|err| Failure::validation(err.into()))?;
                text.push_str(&serde_json::to_string(&StudentRow { id: &e.id, input, target }).context("encoding row")?);
                text.push('\n');
            }
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            outputs.push(path);
        }
    }
    ctx.out(format!("student files for {} condition(s) written\n", CONDITIONS.len()));
    ctx.record("export-student", f, &inputs, &outputs)
}

fn read_predictions(path: &Path) -> StageResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        #[derive(serde::Deserialize)]
        struct Row {
            id: String,
            prediction: String,
        }
        let row: Row = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: expected {{\"id\", \"prediction\"}}", path.display(), i + 1))
            .map_err(Failure::validation)?;
        out.insert(row.id, row.prediction);
    }
    Ok(out)
}

/// Swap dev and test so the test-partition scorer reads the dev set.
fn score_dev(split: &mut SplitAssignment) {
    for part in split.partition.values_mut() {
        *part = match *part {
            Partition::Dev => Partition::Test,
            Partition::Test => Partition::Dev,
            Partition::Train => Partition::Train,
        };
    }
}

/// Score the test partition, or the dev partition when `on` is `Dev`.
pub fn eval(ctx: &Ctx, fold: &Fold, predictions: Option<&Path>, on: Partition) -> StageResult<BTreeMap<String, EvalReport>> {
    let f = Some(fold.fold_id.as_str());
    // dev and test scores are separate artifacts, so separate stages
    let (stage, suffix) = if on == Partition::Dev { ("eval-dev", ".dev") } else { ("eval", "") };
    ctx.begin(stage, f)?;
    let mut state = ctx.fold_state(fold)?;
    if on == Partition::Dev {
        score_dev(&mut state.split);
    }
    let task = ctx.config.task;
    let dir = state.dir.join("eval");
    let mut inputs = Ctx::fold_files(&state);
    let mut reports = BTreeMap::new();

    if let Some(path) = predictions {
        let preds = read_predictions(path)?;
        let report = evaluate_with(&state.dataset, &state.index, &state.split, task, |e, _| preds.get(&e.id).cloned())
            .map_err(|e| Failure::validation(e.into()))?;
        reports.insert("external".to_string(), report);
        inputs.push(path.to_path_buf());
    } else {
        if task == StudentTask::SlotFilling {
            return Err(Failure::validation(anyhow!(
                "the built-in student only predicts labels; pass --predictions for slot filling"
            )));
        }
        inputs.extend(mixed_files(ctx, &state)?);
        for cond in CONDITIONS {
            // inherits the dev/test swap from `state.split`
            let (dataset, split) = load_condition(&state, cond)?;
            let student = train_reference_student(&dataset, &split, task).map_err(|e| Failure::validation(e.into()))?;
            let report = evaluate(&student, &dataset, &state.index, &split, task).map_err(|e| Failure::validation(e.into()))?;
            reports.insert(cond.to_string(), report);
        }
    }

    let mut outputs = Vec::new();
    let mut table = String::new();
    let order = std::iter::once("external").chain(CONDITIONS);
    for (cond, report) in order.filter_map(|c| reports.get(c).map(|r| (c, r))) {
        let path = dir.join(format!("{cond}{suffix}.json"));
        write_json(&path, report)?;
        outputs.push(path);
        let _ = writeln!(table, "== {cond} [{}{suffix}] ==\n{}", state.id, report.to_table());
    }
    ctx.out(table);
    ctx.record(stage, f, &inputs, &outputs)?;
    Ok(reports)
}
