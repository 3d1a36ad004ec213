//! Experiment plans: one JSON document naming the stages to run (data
//! generation, training grid, evaluation grid, RSA, MIRC search, reports),
//! executed into an artifact directory. Each stage is skipped when its
//! inputs and recorded outputs are unchanged.

mod report;
mod stages;
mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchitectureSpec, Variant, DESK_ERFS};
use crate::data::Regime;
use crate::error::{EscError, Result};

pub use report::{write_reports, REPORT_FILES};
pub use stages::{
    ClassGapRecord, EvalRecord, EvalSummary, MdsRecord, MircImageRecord, MircSummary, R2Record, RsaSummary,
    ScrambleRecord, TrainRun, TrainSummary,
};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "esc";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STATUS_FILE: &str = "status.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLAN_FILE: &str = "plan.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Eval,
    Rsa,
    Mirc,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::GenData,
        Stage::Train,
        Stage::Eval,
        Stage::Rsa,
        Stage::Mirc,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Rsa => "rsa",
            Stage::Mirc => "mirc",
            Stage::Report => "report",
        }
    }

    /// Directory (relative to the artifact root) owned by the stage.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::Train => "models",
            Stage::Eval => "eval",
            Stage::Rsa => "rsa",
            Stage::Mirc => "mirc",
            Stage::Report => "reports",
        }
    }

    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::Train => &[Stage::GenData],
            Stage::Eval => &[Stage::GenData, Stage::Train],
            Stage::Rsa => &[Stage::GenData, Stage::Train, Stage::Eval],
            Stage::Mirc => &[Stage::GenData, Stage::Train],
            Stage::Report => &[Stage::Train, Stage::Eval],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = EscError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| EscError::Config(format!("unknown stage {s:?}")))
    }
}

/// A trained model within one repetition: a base of the given ERF, alone or
/// with a follow-up stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelKey {
    pub erf: usize,
    pub variant: Variant,
}

impl ModelKey {
    pub fn base(erf: usize) -> Self {
        Self {
            erf,
            variant: Variant::Base,
        }
    }

    pub fn id(&self) -> String {
        match self.variant {
            Variant::Base => format!("erf{}", self.erf),
            Variant::BaseFollowup => format!("erf{}-followup", self.erf),
            Variant::BaseOneByOne => format!("erf{}-1x1", self.erf),
            Variant::BaseFollowupScrambled => format!("erf{}-scrambled", self.erf),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStage {
    pub regimes: Vec<Regime>,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStage {
    /// Base-network ERFs trained in every regime and repetition.
    pub erfs: Vec<usize>,
    /// Bases that receive follow-up stacks.
    pub followup_erfs: Vec<usize>,
    pub followups: Vec<Variant>,
    pub repetitions: usize,
    pub epochs: usize,
    pub followup_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub momentum: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStage {
    pub local_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaStage {
    pub images_per_class: usize,
    /// Use logits instead of post-softmax values for the last layer.
    pub logits: bool,
    pub class_gap_images: usize,
    pub class_gap_repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MircStage {
    pub regimes: Vec<Regime>,
    pub models: Vec<ModelKey>,
    pub images_per_class: usize,
    pub cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub stages: Vec<Stage>,
    pub data: DataStage,
    pub train: TrainStage,
    pub eval: EvalStage,
    pub rsa: RsaStage,
    pub mirc: MircStage,
}

fn mirc_models(small: usize, large: usize) -> Vec<ModelKey> {
    vec![
        ModelKey::base(small),
        ModelKey::base(large),
        ModelKey {
            erf: small,
            variant: Variant::BaseFollowup,
        },
        ModelKey {
            erf: small,
            variant: Variant::BaseFollowupScrambled,
        },
    ]
}

impl ExperimentPlan {
    /// The desk-scale grid: both regimes, smallest and largest desk ERF,
    /// all three follow-ups on the smallest, three repetitions.
    pub fn desk() -> Self {
        let (small, large) = (DESK_ERFS[0], DESK_ERFS[DESK_ERFS.len() - 1]);
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            name: "desk".into(),
            seed: 0,
            output_dir: None,
            stages: Stage::ORDER.to_vec(),
            data: DataStage {
                regimes: vec![Regime::Shape, Regime::Texture],
                classes: 10,
                train_per_class: 100,
                test_per_class: 30,
                size: 64,
            },
            train: TrainStage {
                erfs: vec![small, large],
                followup_erfs: vec![small],
                followups: vec![Variant::BaseFollowup, Variant::BaseOneByOne, Variant::BaseFollowupScrambled],
                repetitions: 3,
                epochs: 10,
                followup_epochs: 10,
                batch_size: 32,
                initial_lr: 0.01,
                momentum: 0.9,
            },
            eval: EvalStage { local_window: 2 },
            rsa: RsaStage {
                images_per_class: 8,
                logits: false,
                class_gap_images: 10,
                class_gap_repetitions: 100,
            },
            mirc: MircStage {
                regimes: vec![Regime::Shape],
                models: mirc_models(small, large),
                images_per_class: 2,
                cap: crate::mirc::DEFAULT_CAP,
            },
        }
    }

    /// A seconds-scale plan exercising every stage.
    pub fn smoke() -> Self {
        let mut p = Self::desk();
        p.name = "smoke".into();
        p.data.classes = 4;
        p.data.train_per_class = 6;
        p.data.test_per_class = 4;
        p.train.erfs = vec![7, 15];
        p.mirc.models = mirc_models(7, 15);
        p.train.repetitions = 1;
        p.train.epochs = 1;
        p.train.followup_epochs = 1;
        p.rsa.images_per_class = 2;
        p.rsa.class_gap_images = 2;
        p.rsa.class_gap_repetitions = 5;
        p.mirc.images_per_class = 1;
        p.mirc.cap = 2;
        p
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| EscError::Config(format!("plan: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Hash of the plan without its output directory.
    pub fn hash(&self) -> String {
        let mut p = self.clone();
        p.output_dir = None;
        hex(&Sha256::digest(serde_json::to_vec(&p).expect("plan serializes")))[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EscError::Config(format!("plan {}: {m}", self.name)));
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return bad(format!("schema version {} unsupported", self.schema_version));
        }
        let mut seen = Vec::new();
        for s in &self.stages {
            if seen.contains(s) {
                return bad(format!("stage {} listed twice", s.name()));
            }
            seen.push(*s);
        }
        let d = &self.data;
        if d.regimes.is_empty() || d.classes < 2 || d.train_per_class == 0 || d.test_per_class == 0 {
            return bad("data needs a regime, two classes and samples in both splits".into());
        }
        let t = &self.train;
        if t.erfs.is_empty() || t.repetitions == 0 || t.epochs == 0 || t.followup_epochs == 0 || t.batch_size == 0 {
            return bad("training needs ERFs, repetitions, epochs and a batch size".into());
        }
        for &e in &t.erfs {
            let spec = ArchitectureSpec::desk(e, d.classes, 1)?;
            if spec.input_size != d.size {
                return bad(format!("image size {} differs from the network input {}", d.size, spec.input_size));
            }
        }
        if let Some(e) = t.followup_erfs.iter().find(|e| !t.erfs.contains(e)) {
            return bad(format!("follow-up ERF {e} is not trained"));
        }
        if t.followups.contains(&Variant::Base) {
            return bad("follow-up list contains the base variant".into());
        }
        if self.eval.local_window < 2 {
            return bad("local window must be at least 2".into());
        }
        if self.rsa.images_per_class * d.classes < 3 || self.rsa.images_per_class > d.test_per_class {
            return bad("RSA stimuli need at least 3 images and at most the test split".into());
        }
        if self.rsa.class_gap_images > d.test_per_class {
            return bad("class-conditioned RSA draws more images than a class has".into());
        }
        let trained = self.models();
        if let Some(m) = self.mirc.models.iter().find(|m| !trained.contains(m)) {
            return bad(format!("MIRC model {} is not trained", m.id()));
        }
        if let Some(r) = self.mirc.regimes.iter().find(|r| !d.regimes.contains(r)) {
            return bad(format!("MIRC regime {} has no data", r.name()));
        }
        if self.mirc.images_per_class > d.test_per_class {
            return bad("MIRC images per class exceed the test split".into());
        }
        Ok(())
    }

    /// Every model trained per regime and repetition, bases first.
    pub fn models(&self) -> Vec<ModelKey> {
        let mut out: Vec<ModelKey> = self.train.erfs.iter().map(|&e| ModelKey::base(e)).collect();
        for &erf in &self.train.followup_erfs {
            for &variant in &self.train.followups {
                out.push(ModelKey { erf, variant });
            }
        }
        out
    }

    pub fn smallest_erf(&self) -> usize {
        self.train.erfs.iter().copied().min().unwrap_or(0)
    }

    pub fn largest_erf(&self) -> usize {
        self.train.erfs.iter().copied().max().unwrap_or(0)
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        crate::rng::derive_seed(self.seed, &format!("rep/{rep}"))
    }

    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        match stage {
            Stage::GenData => serde_json::to_value(&self.data),
            Stage::Train => serde_json::to_value(&self.train),
            Stage::Eval => serde_json::to_value(&self.eval),
            Stage::Rsa => serde_json::to_value(&self.rsa),
            Stage::Mirc => serde_json::to_value(&self.mirc),
            Stage::Report => Ok(serde_json::Value::Null),
        }
        .expect("config serializes")
    }
}

/// Provenance stamped into every emitted text file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub plan_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn for_plan(plan: &ExperimentPlan) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            plan_hash: plan.hash(),
            seed: plan.seed,
        }
    }

    pub fn csv_comment(&self) -> String {
        format!("# {} {} plan={} seed={}\n", self.tool, self.version, self.plan_hash, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub meta: Meta,
    pub body: T,
}

pub fn write_stamped<T: Serialize>(path: &Path, meta: &Meta, body: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let v = serde_json::json!({ "meta": meta, "body": body });
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

pub fn read_stamped<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker threads for independent jobs: `ESC_THREADS` when set, otherwise
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("ESC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to `threads` workers; results keep the
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every job ran"))
        .collect()
}

/// Relative path → SHA-256 of every file below `dir`.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| EscError::Io(e.into()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).expect("below root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(rel, hex(&Sha256::digest(std::fs::read(entry.path())?)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStatus {
    pub status: RunStatus,
    pub meta: Meta,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Shared state of one plan execution.
pub struct PlanContext<'a> {
    pub plan: &'a ExperimentPlan,
    pub out: PathBuf,
    pub meta: Meta,
    pub threads: usize,
}

impl PlanContext<'_> {
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    pub fn regime_data(&self, regime: Regime) -> PathBuf {
        self.stage_dir(Stage::GenData).join(regime.name())
    }

    pub fn rep_dir(&self, stage: Stage, regime: Regime, rep: usize) -> PathBuf {
        self.stage_dir(stage).join(regime.name()).join(format!("rep{rep}"))
    }

    pub fn checkpoint(&self, regime: Regime, rep: usize, model: &ModelKey) -> PathBuf {
        self.rep_dir(Stage::Train, regime, rep).join(format!("{}.ckpt", model.id()))
    }

    pub fn summary<T: DeserializeOwned>(&self, stage: Stage) -> Result<Option<T>> {
        let p = self.stage_dir(stage).join(SUMMARY_FILE);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(read_stamped::<T>(&p)?.body))
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.out.join("stages").join(format!("{}.json", stage.name()))
    }

    fn record(&self, stage: Stage) -> Result<Option<StageRecord>> {
        let p = self.record_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let mut deps = Vec::new();
        for dep in stage.requires() {
            match self.record(*dep)? {
                Some(r) => deps.push(r.key),
                None => {
                    return Err(EscError::Config(format!(
                        "stage {} needs the outputs of {}",
                        stage.name(),
                        dep.name()
                    )))
                }
            }
        }
        let v = serde_json::json!({
            "version": TOOL_VERSION,
            "stage": stage,
            "plan": self.meta.plan_hash,
            "seed": self.plan.seed,
            "config": self.plan.stage_config(stage),
            "deps": deps,
        });
        Ok(hex(&Sha256::digest(serde_json::to_vec(&v)?)))
    }
}

/// Executes the plan's stages in pipeline order. `status.json` in the
/// artifact directory records the outcome either way.
pub fn run_plan(plan: &ExperimentPlan, out: &Path) -> Result<PlanStatus> {
    plan.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(PLAN_FILE), plan.to_json() + "\n")?;
    let ctx = PlanContext {
        plan,
        out: out.to_path_buf(),
        meta: Meta::for_plan(plan),
        threads: worker_threads(),
    };
    let mut status = PlanStatus {
        status: RunStatus::Ok,
        meta: ctx.meta.clone(),
        ran: Vec::new(),
        skipped: Vec::new(),
        failed_stage: None,
        error: None,
    };
    let write_status = |s: &PlanStatus| -> Result<()> {
        std::fs::write(out.join(STATUS_FILE), serde_json::to_string_pretty(s)? + "\n")?;
        Ok(())
    };
    for stage in Stage::ORDER.into_iter().filter(|s| plan.stages.contains(s)) {
        match run_stage(&ctx, stage) {
            Ok(true) => status.ran.push(stage),
            Ok(false) => status.skipped.push(stage),
            Err(e) => {
                status.status = RunStatus::Failed;
                status.failed_stage = Some(stage);
                status.error = Some(e.to_string());
                write_status(&status)?;
                return Err(e);
            }
        }
    }
    write_status(&status)?;
    Ok(status)
}

/// Rewrites the report files of an existing artifact directory from its
/// saved plan and stage summaries.
pub fn regenerate_reports(out: &Path) -> Result<()> {
    let plan = ExperimentPlan::load(&out.join(PLAN_FILE))?;
    let ctx = PlanContext {
        plan: &plan,
        out: out.to_path_buf(),
        meta: Meta::for_plan(&plan),
        threads: 1,
    };
    write_reports(&ctx)
}

fn run_stage(ctx: &PlanContext, stage: Stage) -> Result<bool> {
    let key = ctx.stage_key(stage)?;
    let dir = ctx.stage_dir(stage);
    if let Some(rec) = ctx.record(stage)? {
        if rec.key == key && hash_tree(&dir)? == rec.files {
            log::info!("stage {} up to date", stage.name());
            return Ok(false);
        }
    }
    log::info!("running stage {}", stage.name());
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    match stage {
        Stage::GenData => stages::gen_data(ctx)?,
        Stage::Train => stages::train(ctx)?,
        Stage::Eval => stages::eval(ctx)?,
        Stage::Rsa => stages::rsa(ctx)?,
        Stage::Mirc => stages::mirc(ctx)?,
        Stage::Report => write_reports(ctx)?,
    }
    let rec = StageRecord {
        stage,
        key,
        files: hash_tree(&dir)?,
    };
    let p = ctx.record_path(stage);
    std::fs::create_dir_all(p.parent().expect("has parent"))?;
    std::fs::write(p, serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(true)
}
