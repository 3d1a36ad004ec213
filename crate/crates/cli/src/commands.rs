use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use esc::arch::{
    compute_theoretical_erf, count_followup_params, count_params as param_count, match_width, receptive_field, ArchitectureSpec,
    ComposedModel, FollowupKind, PermutationMap, ReceptiveFieldState, ScrambleKind, Variant,
};
use esc::checkpoint::Checkpoint;
use esc::data::{generate_dataset, Dataset, GenConfig, RawImage, Regime};
use esc::experiment::{self, evaluate_modes, scrambling_report, ClassMetrics, Evaluation, ScrambleMode, TrainConfig};
use esc::mirc::{
    cluster_mircs, max_mirc_level_histogram, mirc_search, validate_tree, MircOutcome, MircRecord, ModelPatchClassifier,
};
use esc::plan::{self, ExperimentPlan};
use esc::rng::derive_seed;
use esc::rsa::{
    classical_mds, extract_activations, rdm_r2, sample_stimuli, second_order_rdm, Rdm, ZeroVariance, GAP_LAYER,
    SOFTMAX_LAYER,
};
use esc::tensor::{LrSchedule, Tensor};
use esc::EscError;

use crate::{FollowupArg, Preset, ScrambleArg};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    EscError::Config(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ComposedModel> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .to_model()?)
}

fn family(erf: usize, desk: bool, classes: usize) -> Result<ArchitectureSpec> {
    Ok(if desk {
        ArchitectureSpec::desk(erf, classes, 1)?
    } else {
        ArchitectureSpec::full(erf, classes)?
    })
}

fn followup_kind(f: FollowupArg) -> FollowupKind {
    match f {
        FollowupArg::Aggregating => FollowupKind::Aggregating,
        FollowupArg::OneByOne => FollowupKind::OneByOne,
    }
}

pub fn gen_data(regime: &str, classes: usize, train: usize, test: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = GenConfig {
        regime: regime.parse::<Regime>()?,
        classes,
        train_per_class: train,
        test_per_class: test,
        size,
        seed,
    };
    let m = generate_dataset(&cfg, out)?;
    println!("{} samples written to {}", m.samples.len(), out.display());
    Ok(())
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f32 {
    0.9
}
fn default_arch() -> String {
    "desk".into()
}

/// Contents of a `train --config` file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    data: PathBuf,
    out: PathBuf,
    erf: usize,
    variant: Variant,
    #[serde(default = "default_arch")]
    architecture: String,
    #[serde(default)]
    base_checkpoint: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_lr")]
    initial_lr: f64,
    #[serde(default = "default_momentum")]
    momentum: f32,
    #[serde(default)]
    checkpoint_every: Option<usize>,
}

pub fn train(config: &Path, seed: Option<u64>, epochs: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut job: TrainJob = read_json(config)?;
    let root = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    job.seed = seed.unwrap_or(job.seed);
    job.epochs = epochs.unwrap_or(job.epochs);
    let out = out.unwrap_or_else(|| resolve(&job.out));
    let data = Dataset::load(&resolve(&job.data))?;
    let mut model = if job.variant == Variant::Base {
        let spec = match job.architecture.as_str() {
            "desk" => ArchitectureSpec::desk(job.erf, data.classes(), data.manifest.channels)?,
            "full" => ArchitectureSpec::full(job.erf, data.classes())?,
            other => return Err(config_error(format!("unknown architecture {other:?}"))),
        };
        ComposedModel::new_base(&spec, job.seed)?
    } else {
        let base_path = job
            .base_checkpoint
            .as_deref()
            .ok_or_else(|| config_error("follow-up variants need base_checkpoint"))?;
        let base = load_model(&resolve(base_path))?;
        let scrambler = if job.variant.scrambled_training() {
            let side = base.descriptor.base.output_size();
            Some(PermutationMap::random((side, side), ScrambleKind::Global, derive_seed(job.seed, "scrambler"))?)
        } else {
            None
        };
        ComposedModel::compose(&base, job.variant, scrambler, job.seed)?
    };
    let mut cfg = TrainConfig::new(job.variant, job.epochs, job.seed);
    cfg.batch_size = job.batch_size;
    cfg.momentum = job.momentum;
    cfg.checkpoint_every = job.checkpoint_every;
    cfg.schedule = LrSchedule {
        initial_lr: job.initial_lr,
        ..LrSchedule::default()
    };
    let ckpt_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&ckpt_dir)?;
    let outcome = experiment::train(&mut model, &data, &cfg, job.checkpoint_every.map(|_| ckpt_dir.as_path()))?;
    Checkpoint::from_model(&model, Some(&outcome.optimizer)).save(&out)?;
    write_json(&out.with_extension("history.json"), &outcome.history)?;
    if let Some(last) = outcome.history.epochs.last() {
        println!(
            "{} epochs: loss {:.4}, train accuracy {:.4}; saved {}",
            outcome.history.epochs.len(),
            last.loss,
            last.accuracy,
            out.display()
        );
    }
    Ok(())
}

fn metrics_csv(m: &ClassMetrics, reference: Option<&ClassMetrics>, threshold: f64) -> String {
    let mut s = String::from("class,precision,recall,f1,support,ratio,eligible\n");
    for c in 0..m.classes() {
        let before = reference.map_or(m.f1[c], |r| r.f1[c]);
        let ratio = if before > 0.0 { m.f1[c] / before } else { 0.0 };
        s += &format!(
            "{c},{:.6},{:.6},{:.6},{},{:.6},{}\n",
            m.precision[c],
            m.recall[c],
            m.f1[c],
            m.support[c],
            ratio,
            before > threshold
        );
    }
    s
}

pub fn eval(checkpoint: &Path, data: &Path, scramble: ScrambleArg, window: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    let data = Dataset::load(data)?;
    let mode = match scramble {
        ScrambleArg::None => ScrambleMode::None,
        ScrambleArg::Global => ScrambleMode::Global,
        ScrambleArg::Local => ScrambleMode::Local { window },
    };
    let modes = if mode == ScrambleMode::None { vec![mode] } else { vec![ScrambleMode::None, mode] };
    let evs = evaluate_modes(&mut model, &data.test, &data.preprocess_config(), &modes, seed, None)?;
    let ev = evs.last().expect("one mode");
    println!("{} accuracy {:.4}", mode.tag(), ev.metrics.accuracy);
    if let Some(prefix) = out {
        write_json(&prefix.with_extension("json"), ev)?;
        let csv = metrics_csv(&ev.metrics, Some(&evs[0].metrics), experiment::ELIGIBILITY_THRESHOLD);
        std::fs::write(prefix.with_extension("csv"), csv)?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricsFile {
    Evaluation(Evaluation),
    Metrics(ClassMetrics),
}

fn read_metrics(path: &Path) -> Result<ClassMetrics> {
    Ok(match read_json::<MetricsFile>(path)? {
        MetricsFile::Evaluation(e) => e.metrics,
        MetricsFile::Metrics(m) => m,
    })
}

pub fn scramble_report(before: &Path, after: &Path, threshold: f64, out: Option<&Path>) -> Result<()> {
    let report = scrambling_report(&read_metrics(before)?, &read_metrics(after)?, threshold)?;
    println!("most sensitive: {:?}", report.most_sensitive);
    println!("least sensitive: {:?}", report.least_sensitive);
    match out {
        Some(prefix) => {
            write_json(&prefix.with_extension("json"), &report)?;
            std::fs::write(prefix.with_extension("csv"), report.to_csv())?;
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn rsa(checkpoints: &[PathBuf], data: &Path, images_per_class: usize, seed: u64, logits: bool, out: &Path) -> Result<()> {
    let data = Dataset::load(data)?;
    let pre = data.preprocess_config();
    let classes: Vec<usize> = (0..data.classes()).collect();
    let stimuli = sample_stimuli(&data.test, &classes, images_per_class, seed)?;
    std::fs::create_dir_all(out)?;
    let mut all: Vec<Rdm> = Vec::new();
    let mut last: BTreeMap<String, (Rdm, Rdm)> = BTreeMap::new();
    for path in checkpoints {
        let name = model_name(path);
        let mut m = load_model(path)?;
        let acts = extract_activations(&mut m, &name, &data.test, &pre, &stimuli, logits, None)?;
        for layer in &acts.layers {
            let r = acts.rdm(layer, ZeroVariance::Strict)?;
            r.save(&out.join(format!("{name}.{layer}.rdm")))?;
            all.push(r);
        }
        last.insert(name, (acts.rdm(GAP_LAYER, ZeroVariance::Strict)?, acts.rdm(SOFTMAX_LAYER, ZeroVariance::Strict)?));
    }
    let second = second_order_rdm(&all)?;
    second.save(&out.join("second_order.rdm"))?;
    let mut mds = String::from("model,layer,x,y\n");
    for (r, c) in all.iter().zip(classical_mds(&second, 2)?) {
        mds += &format!("{},{},{:.6},{:.6}\n", r.provenance.model, r.provenance.layer, c[0], c[1]);
    }
    std::fs::write(out.join("mds.csv"), mds)?;
    let mut r2 = String::from("layer,model_a,model_b,r2\n");
    let names: Vec<&String> = last.keys().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            r2 += &format!("{GAP_LAYER},{a},{b},{:.6}\n", rdm_r2(&last[*a].0, &last[*b].0)?);
            r2 += &format!("{SOFTMAX_LAYER},{a},{b},{:.6}\n", rdm_r2(&last[*a].1, &last[*b].1)?);
        }
    }
    std::fs::write(out.join("r2.csv"), r2)?;
    println!("{} RDMs over {} stimuli written to {}", all.len(), stimuli.len(), out.display());
    Ok(())
}

/// Written next to the trees so `mirc-cluster` can find its inputs.
#[derive(Serialize, Deserialize)]
struct MircRun {
    checkpoint: PathBuf,
    dataset: PathBuf,
    cap: usize,
}

fn image_tensor(data: &Dataset, index: usize) -> Result<Tensor<f32>> {
    let x = data.test.eval_batch(&[index], &data.preprocess_config())?;
    Ok(Tensor::new(x.shape()[1..].to_vec(), x.data().to_vec())?)
}

pub fn mirc(checkpoint: &Path, dataset: &Path, cap: usize, per_class: Option<usize>, out: &Path) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    let data = Dataset::load(dataset)?;
    let id = model_name(checkpoint);
    let mut picks = Vec::new();
    for c in 0..data.classes() {
        let of_class = (0..data.test.len()).filter(|&i| data.test.labels[i] == c);
        picks.extend(of_class.take(per_class.unwrap_or(usize::MAX)));
    }
    let mut outcomes = Vec::new();
    let mut rows = String::from("image_id,class,applicable,max_level,mircs,evaluated\n");
    let mut invalid = 0;
    for i in picks {
        let image = image_tensor(&data, i)?;
        let side = image.shape()[1];
        let class = data.test.labels[i];
        let mut clf = ModelPatchClassifier { model: &mut model, image };
        let outcome = mirc_search(&mut clf, side, side, class, cap, &data.test.ids[i], &id)?;
        match outcome.tree() {
            Some(t) => {
                if let Err(e) = validate_tree(t, &mut clf) {
                    log::error!("{e}");
                    invalid += 1;
                }
                rows += &format!("{},{class},true,{},{},{}\n", t.image_id, t.max_level(), t.mircs().len(), t.evaluated);
            }
            None => rows += &format!("{},{class},false,,0,1\n", data.test.ids[i]),
        }
        outcomes.push(outcome);
    }
    std::fs::create_dir_all(out)?;
    write_json(&out.join("trees.json"), &outcomes)?;
    std::fs::write(out.join("images.csv"), rows)?;
    let trees: Vec<_> = outcomes.iter().filter_map(MircOutcome::tree).collect();
    let mut hist = String::from("level,count\n");
    if !trees.is_empty() {
        for (l, n) in max_mirc_level_histogram(&trees, cap)?.iter().enumerate() {
            hist += &format!("{l},{n}\n");
        }
    }
    std::fs::write(out.join("histogram.csv"), hist)?;
    write_json(
        &out.join("run.json"),
        &MircRun {
            checkpoint: std::fs::canonicalize(checkpoint)?,
            dataset: std::fs::canonicalize(dataset)?,
            cap,
        },
    )?;
    println!("{} of {} images correctly classified; trees in {}", trees.len(), outcomes.len(), out.display());
    if invalid > 0 {
        anyhow::bail!("{invalid} trees failed the post-hoc validity check");
    }
    Ok(())
}

#[derive(Serialize)]
struct ClusterOutput<'a> {
    class: usize,
    class_name: &'a str,
    records: Vec<ClusterMember<'a>>,
    report: esc::mirc::ClusterReport,
}

#[derive(Serialize)]
struct ClusterMember<'a> {
    image_id: &'a str,
    rect: esc::mirc::PatchRect,
    probability: f32,
}

pub fn mirc_cluster(dir: &Path, class: &str, k: usize, per_cluster: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let run: MircRun = read_json(&dir.join("run.json"))?;
    let outcomes: Vec<MircOutcome> = read_json(&dir.join("trees.json"))?;
    let data = Dataset::load(&run.dataset)?;
    let names = &data.manifest.class_names;
    let c = names
        .iter()
        .position(|n| n == class)
        .or_else(|| class.parse::<usize>().ok().filter(|c| *c < names.len()))
        .ok_or_else(|| config_error(format!("unknown class {class:?}")))?;
    let mut model = load_model(&run.checkpoint)?;
    let mut records = Vec::new();
    for t in outcomes.iter().filter_map(MircOutcome::tree).filter(|t| t.true_class == c) {
        let index = data
            .test
            .ids
            .iter()
            .position(|id| *id == t.image_id)
            .ok_or_else(|| EscError::Data(format!("image {} not in the test split", t.image_id)))?;
        let rects: Vec<_> = t.mircs().iter().map(|n| (n.rect, n.probability)).collect();
        let mut clf = ModelPatchClassifier {
            model: &mut model,
            image: image_tensor(&data, index)?,
        };
        let latents = clf.latents(&rects.iter().map(|r| r.0).collect::<Vec<_>>())?;
        for ((rect, probability), latent) in rects.into_iter().zip(latents) {
            records.push(MircRecord {
                image_id: t.image_id.clone(),
                rect,
                probability,
                latent,
            });
        }
    }
    let report = cluster_mircs(&records, k, per_cluster, seed)?;
    let out = out.unwrap_or_else(|| dir.join(format!("cluster_{}", names[c])));
    std::fs::create_dir_all(&out)?;
    let bg = data.manifest.background;
    for (ci, cl) in report.clusters.iter().enumerate() {
        for (rank, &m) in cl.representatives.iter().enumerate() {
            let r = &records[m];
            let index = data.test.ids.iter().position(|id| *id == r.image_id).expect("seen above");
            let img = image_tensor(&data, index)?;
            let w = img.shape()[2];
            let mut px = Vec::with_capacity(r.rect.w * r.rect.h);
            for y in r.rect.y0..r.rect.y0 + r.rect.h {
                for x in r.rect.x0..r.rect.x0 + r.rect.w {
                    let v = img.data()[y * w + x] * 0.5 + bg;
                    px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            let crop = RawImage {
                height: r.rect.h,
                width: r.rect.w,
                channels: 1,
                data: px,
            };
            crop.save(&out.join(format!("cluster{ci}_{rank}_{}.png", r.image_id.replace('/', "_"))))?;
        }
    }
    let output = ClusterOutput {
        class: c,
        class_name: &names[c],
        records: records
            .iter()
            .map(|r| ClusterMember {
                image_id: &r.image_id,
                rect: r.rect,
                probability: r.probability,
            })
            .collect(),
        report,
    };
    write_json(&out.join("clusters.json"), &output)?;
    println!("{} MIRCs in {k} clusters; report in {}", records.len(), out.display());
    Ok(())
}

fn describe_state(label: &str, s: &ReceptiveFieldState) {
    println!("{label:<24} rf {:>4}  jump {:>3}  size {:>4}", s.rf, s.jump, s.size);
}

pub fn erf_describe(erf: usize, desk: bool, classes: Option<usize>, followup: Option<FollowupArg>) -> Result<()> {
    let spec = family(erf, desk, classes.unwrap_or(10))?;
    let mut state = ReceptiveFieldState::input(spec.input_size);
    describe_state("input", &state);
    state = state.conv(spec.stem.kernel, spec.stem.stride);
    describe_state("stem", &state);
    let kind = followup.map(followup_kind);
    let mut units: Vec<(String, _)> = spec.units().into_iter().enumerate().map(|(i, u)| (format!("base.unit{i}"), u)).collect();
    if let Some(k) = kind {
        units.extend(k.units(spec.output_channels()).into_iter().enumerate().map(|(i, u)| (format!("followup.unit{i}"), u)));
    }
    for (name, u) in units {
        for (kernel, stride) in u.convs() {
            state = state.conv(kernel, stride);
        }
        describe_state(&name, &state);
    }
    assert_eq!(state, receptive_field(&spec, kind));
    println!("{}: theoretical ERF {} px", spec.name, compute_theoretical_erf(&spec, kind));
    Ok(())
}

pub fn count_params(erf: usize, desk: bool, classes: Option<usize>, followup: Option<FollowupArg>, match_erf: Option<usize>) -> Result<()> {
    let classes = classes.unwrap_or(if desk { 10 } else { 1000 });
    let spec = family(erf, desk, classes)?;
    let base = param_count(&spec);
    println!("{}: {base} parameters", spec.name);
    if let Some(f) = followup {
        let kind = followup_kind(f);
        let n = count_followup_params(kind, spec.output_channels(), classes);
        println!("{kind:?} follow-up: {n} parameters (total with frozen base {})", base + n);
    }
    if let Some(target_erf) = match_erf {
        let target = param_count(&family(target_erf, desk, classes)?);
        let m = match_width(&spec, target)?;
        println!(
            "width x{:.4}: {} parameters vs {target} ({:+.3}%), ERF still {}",
            m.multiplier,
            m.count,
            100.0 * (m.count as f64 - target as f64) / target as f64,
            compute_theoretical_erf(&m.spec, None)
        );
    }
    Ok(())
}

pub fn run_plan(path: Option<&Path>, preset: Option<Preset>, out: Option<PathBuf>, seed: Option<u64>, print: bool) -> Result<()> {
    let mut p = match (path, preset) {
        (Some(path), _) => ExperimentPlan::load(path)?,
        (None, Some(Preset::Smoke)) => ExperimentPlan::smoke(),
        (None, _) => ExperimentPlan::desk(),
    };
    if let Some(s) = seed {
        p.seed = s;
    }
    if let Some(o) = out {
        p.output_dir = Some(o);
    }
    p.validate()?;
    if print {
        println!("{}", p.to_json());
        return Ok(());
    }
    let dir = p
        .output_dir
        .clone()
        .ok_or_else(|| config_error("no output directory: set output_dir or pass --out"))?;
    let status = plan::run_plan(&p, &dir)?;
    let names = |v: &[plan::Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
    println!("plan {} ({}) done in {}", p.name, p.hash(), dir.display());
    println!("ran: [{}] skipped: [{}]", names(&status.ran), names(&status.skipped));
    Ok(())
}

pub fn report(dir: &Path) -> Result<()> {
    plan::regenerate_reports(dir)?;
    println!("reports written to {}", dir.join("reports").display());
    Ok(())
}
