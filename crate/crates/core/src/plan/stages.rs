use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{parallel_map, write_stamped, ModelKey, PlanContext, Stage, SUMMARY_FILE};
use crate::arch::{ArchitectureSpec, ComposedModel, PermutationMap, ScrambleKind, Variant};
use crate::checkpoint::Checkpoint;
use crate::data::{generate_dataset, Dataset, GenConfig, Regime};
use crate::error::Result;
use crate::experiment::{
    self, evaluate_modes, scrambling_report, History, ScrambleMode, ScramblingReport, TrainConfig,
    ELIGIBILITY_THRESHOLD,
};
use crate::mirc::{mirc_search, validate_tree, MircOutcome, ModelPatchClassifier};
use crate::rng::derive_seed;
use crate::rsa::{
    average_rdms, class_conditioned_r2_gap, classical_mds, extract_activations, rdm_r2, sample_stimuli,
    second_order_rdm, Rdm, Stimulus, ZeroVariance, GAP_LAYER, SOFTMAX_LAYER,
};
use crate::tensor::{LrSchedule, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub regime: Regime,
    pub rep: usize,
    pub model: ModelKey,
    pub seed: u64,
    pub history: History,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<TrainRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub regime: Regime,
    pub rep: usize,
    pub model: ModelKey,
    pub scramble: ScrambleMode,
    pub seed: u64,
    pub accuracy: f64,
    pub f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrambleRecord {
    pub regime: Regime,
    pub rep: usize,
    pub model: ModelKey,
    pub report: ScramblingReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub evaluations: Vec<EvalRecord>,
    /// Unscrambled vs globally scrambled, for models with a boundary.
    pub scrambling: Vec<ScrambleRecord>,
}

impl EvalSummary {
    pub fn find(&self, regime: Regime, rep: usize, model: &ModelKey, scramble: ScrambleMode) -> Option<&EvalRecord> {
        self.evaluations
            .iter()
            .find(|e| e.regime == regime && e.rep == rep && e.model == *model && e.scramble == scramble)
    }

    pub fn report(&self, regime: Regime, rep: usize, model: &ModelKey) -> Option<&ScramblingReport> {
        self.scrambling
            .iter()
            .find(|s| s.regime == regime && s.rep == rep && s.model == *model)
            .map(|s| &s.report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Record {
    pub regime: Regime,
    pub rep: usize,
    pub layer: String,
    pub model_a: String,
    pub model_b: String,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdsRecord {
    pub regime: Regime,
    pub model: String,
    pub layer: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGapRecord {
    pub regime: Regime,
    pub rep: usize,
    pub layer: String,
    pub model_a: String,
    pub model_b: String,
    pub sensitive: Vec<usize>,
    pub insensitive: Vec<usize>,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RsaSummary {
    pub r2: Vec<R2Record>,
    pub mds: Vec<MdsRecord>,
    pub class_gaps: Vec<ClassGapRecord>,
}

impl RsaSummary {
    pub fn r2_of(&self, regime: Regime, rep: usize, layer: &str, a: &str, b: &str) -> Option<f64> {
        self.r2
            .iter()
            .find(|r| {
                r.regime == regime
                    && r.rep == rep
                    && r.layer == layer
                    && ((r.model_a == a && r.model_b == b) || (r.model_a == b && r.model_b == a))
            })
            .map(|r| r.r2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MircImageRecord {
    pub regime: Regime,
    pub rep: usize,
    pub model: ModelKey,
    pub image_id: String,
    pub class: usize,
    /// The full image was classified correctly.
    pub applicable: bool,
    pub max_level: Option<usize>,
    pub mircs: usize,
    pub evaluated: usize,
    pub valid: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MircSummary {
    pub cap: usize,
    pub images: Vec<MircImageRecord>,
}

fn model_seed(ctx: &PlanContext, regime: Regime, rep: usize, model: &ModelKey) -> u64 {
    derive_seed(ctx.plan.rep_seed(rep), &format!("{}/{}", regime.name(), model.id()))
}

fn load_datasets(ctx: &PlanContext, regimes: &[Regime]) -> Result<Vec<Dataset>> {
    regimes.iter().map(|r| Dataset::load(&ctx.regime_data(*r))).collect()
}

fn load_model(ctx: &PlanContext, regime: Regime, rep: usize, model: &ModelKey) -> Result<ComposedModel> {
    Checkpoint::load(&ctx.checkpoint(regime, rep, model))?.to_model()
}

fn reps(ctx: &PlanContext) -> std::ops::Range<usize> {
    0..ctx.plan.train.repetitions
}

pub(super) fn gen_data(ctx: &PlanContext) -> Result<()> {
    let d = &ctx.plan.data;
    parallel_map(&d.regimes, ctx.threads, |&regime| {
        let cfg = GenConfig {
            regime,
            classes: d.classes,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            size: d.size,
            seed: derive_seed(ctx.plan.seed, &format!("data/{}", regime.name())),
        };
        let dir = ctx.regime_data(regime);
        generate_dataset(&cfg, &dir)?;
        write_stamped(&dir.join("provenance.json"), &ctx.meta, &cfg)
    })?;
    Ok(())
}

fn train_config(ctx: &PlanContext, variant: Variant, seed: u64) -> TrainConfig {
    let t = &ctx.plan.train;
    let mut cfg = TrainConfig::new(
        variant,
        if variant == Variant::Base { t.epochs } else { t.followup_epochs },
        seed,
    );
    cfg.batch_size = t.batch_size;
    cfg.momentum = t.momentum;
    cfg.schedule = LrSchedule {
        initial_lr: t.initial_lr,
        ..LrSchedule::default()
    };
    cfg
}

fn save_trained(ctx: &PlanContext, regime: Regime, rep: usize, key: &ModelKey, m: &ComposedModel, out: &experiment::TrainOutcome) -> Result<()> {
    let path = ctx.checkpoint(regime, rep, key);
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    Checkpoint::from_model(m, Some(&out.optimizer)).save(&path)?;
    write_stamped(&path.with_extension("history.json"), &ctx.meta, &out.history)
}

pub(super) fn train(ctx: &PlanContext) -> Result<()> {
    let plan = ctx.plan;
    let regimes = &plan.data.regimes;
    let datasets = load_datasets(ctx, regimes)?;
    let mut base_jobs = Vec::new();
    for ri in 0..regimes.len() {
        for rep in reps(ctx) {
            for &erf in &plan.train.erfs {
                base_jobs.push((ri, rep, ModelKey::base(erf)));
            }
        }
    }
    let bases = parallel_map(&base_jobs, ctx.threads, |&(ri, rep, key)| {
        let (regime, data) = (regimes[ri], &datasets[ri]);
        let seed = model_seed(ctx, regime, rep, &key);
        let spec = ArchitectureSpec::desk(key.erf, data.classes(), data.manifest.channels)?;
        let mut m = ComposedModel::new_base(&spec, seed)?;
        log::info!("training {} {} rep {rep}", regime.name(), key.id());
        let out = experiment::train(&mut m, data, &train_config(ctx, Variant::Base, seed), None)?;
        save_trained(ctx, regime, rep, &key, &m, &out)?;
        Ok((
            TrainRun {
                regime,
                rep,
                model: key,
                seed,
                history: out.history,
            },
            m,
        ))
    })?;
    let mut followup_jobs = Vec::new();
    for (bi, &(ri, rep, base)) in base_jobs.iter().enumerate() {
        if plan.train.followup_erfs.contains(&base.erf) {
            for &variant in &plan.train.followups {
                followup_jobs.push((bi, ri, rep, ModelKey { erf: base.erf, variant }));
            }
        }
    }
    let followups = parallel_map(&followup_jobs, ctx.threads, |&(bi, ri, rep, key)| {
        let (regime, data) = (regimes[ri], &datasets[ri]);
        let base = &bases[bi].1;
        let seed = model_seed(ctx, regime, rep, &key);
        let scrambler = if key.variant.scrambled_training() {
            let side = base.descriptor.base.output_size();
            Some(PermutationMap::random((side, side), ScrambleKind::Global, derive_seed(seed, "scrambler"))?)
        } else {
            None
        };
        let mut m = ComposedModel::compose(base, key.variant, scrambler, seed)?;
        log::info!("training {} {} rep {rep}", regime.name(), key.id());
        let out = experiment::train(&mut m, data, &train_config(ctx, key.variant, seed), None)?;
        save_trained(ctx, regime, rep, &key, &m, &out)?;
        Ok(TrainRun {
            regime,
            rep,
            model: key,
            seed,
            history: out.history,
        })
    })?;
    let runs = bases.into_iter().map(|(r, _)| r).chain(followups).collect();
    write_stamped(&ctx.stage_dir(Stage::Train).join(SUMMARY_FILE), &ctx.meta, &TrainSummary { runs })
}

pub(super) fn eval(ctx: &PlanContext) -> Result<()> {
    let plan = ctx.plan;
    let regimes = &plan.data.regimes;
    let datasets = load_datasets(ctx, regimes)?;
    let mut jobs = Vec::new();
    for ri in 0..regimes.len() {
        for rep in reps(ctx) {
            for key in plan.models() {
                jobs.push((ri, rep, key));
            }
        }
    }
    let results = parallel_map(&jobs, ctx.threads, |&(ri, rep, key)| {
        let (regime, data) = (regimes[ri], &datasets[ri]);
        let mut m = load_model(ctx, regime, rep, &key)?;
        let modes = if m.has_boundary() {
            vec![
                ScrambleMode::None,
                ScrambleMode::Global,
                ScrambleMode::Local {
                    window: plan.eval.local_window,
                },
            ]
        } else {
            vec![ScrambleMode::None]
        };
        let seed = derive_seed(plan.rep_seed(rep), &format!("eval/{}/{}", regime.name(), key.id()));
        let evs = evaluate_modes(&mut m, &data.test, &data.preprocess_config(), &modes, seed, None)?;
        write_stamped(
            &ctx.rep_dir(Stage::Eval, regime, rep).join(format!("{}.json", key.id())),
            &ctx.meta,
            &evs,
        )?;
        let scramble = if m.has_boundary() {
            Some(ScrambleRecord {
                regime,
                rep,
                model: key,
                report: scrambling_report(&evs[0].metrics, &evs[1].metrics, ELIGIBILITY_THRESHOLD)?,
            })
        } else {
            None
        };
        let records: Vec<EvalRecord> = evs
            .into_iter()
            .map(|e| EvalRecord {
                regime,
                rep,
                model: key,
                scramble: e.scramble,
                seed: e.seed,
                accuracy: e.metrics.accuracy,
                f1: e.metrics.f1,
            })
            .collect();
        Ok((records, scramble))
    })?;
    let mut summary = EvalSummary::default();
    for (records, scramble) in results {
        summary.evaluations.extend(records);
        summary.scrambling.extend(scramble);
    }
    write_stamped(&ctx.stage_dir(Stage::Eval).join(SUMMARY_FILE), &ctx.meta, &summary)
}

struct RepRsa {
    rdms: Vec<(String, String, Rdm)>,
    r2: Vec<R2Record>,
    gaps: Vec<ClassGapRecord>,
}

fn rsa_rep(ctx: &PlanContext, regime: Regime, data: &Dataset, stimuli: &[Stimulus], evals: Option<&EvalSummary>, rep: usize) -> Result<RepRsa> {
    let plan = ctx.plan;
    let pre = data.preprocess_config();
    let dir = ctx.rep_dir(Stage::Rsa, regime, rep);
    std::fs::create_dir_all(&dir)?;
    let mut rdms = Vec::new();
    let mut gap_rdms: BTreeMap<String, (Rdm, Rdm)> = BTreeMap::new();
    for key in plan.models() {
        let mut m = load_model(ctx, regime, rep, &key)?;
        let acts = extract_activations(&mut m, &key.id(), &data.test, &pre, stimuli, plan.rsa.logits, None)?;
        for layer in &acts.layers {
            let r = acts.rdm(layer, ZeroVariance::Strict)?;
            if layer == GAP_LAYER {
                r.save(&dir.join(format!("{}.gap.rdm", key.id())))?;
            }
            rdms.push((key.id(), layer.clone(), r));
        }
        let find = |l: &str| rdms.iter().rev().find(|(id, layer, _)| *id == key.id() && layer == l).map(|x| x.2.clone());
        gap_rdms.insert(key.id(), (find(GAP_LAYER).expect("gap"), find(SOFTMAX_LAYER).expect("softmax")));
    }
    let ids: Vec<&String> = gap_rdms.keys().collect();
    let mut r2 = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            for (layer, pick) in [(GAP_LAYER, 0usize), (SOFTMAX_LAYER, 1)] {
                let (ra, rb) = (&gap_rdms[*a], &gap_rdms[*b]);
                let (ra, rb) = if pick == 0 { (&ra.0, &rb.0) } else { (&ra.1, &rb.1) };
                r2.push(R2Record {
                    regime,
                    rep,
                    layer: layer.into(),
                    model_a: (*a).clone(),
                    model_b: (*b).clone(),
                    r2: rdm_r2(ra, rb)?,
                });
            }
        }
    }
    let mut gaps = Vec::new();
    let (small, large) = (plan.smallest_erf(), plan.largest_erf());
    let probe = ModelKey {
        erf: small,
        variant: Variant::BaseFollowup,
    };
    let report = evals.and_then(|e| e.report(regime, rep, &probe));
    match report {
        Some(rep_) if !rep_.most_sensitive.is_empty()
            && !rep_.least_sensitive.is_empty()
            && !rep_.most_sensitive.iter().any(|c| rep_.least_sensitive.contains(c))
            && small != large =>
        {
            let classes: Vec<usize> = rep_.most_sensitive.iter().chain(&rep_.least_sensitive).copied().collect();
            let pool: Vec<Stimulus> = (0..data.test.len())
                .filter(|&i| classes.contains(&data.test.labels[i]))
                .map(|i| Stimulus {
                    id: data.test.ids[i].clone(),
                    class: data.test.labels[i],
                    index: i,
                })
                .collect();
            let layers = [GAP_LAYER, SOFTMAX_LAYER];
            let (ka, kb) = (ModelKey::base(small), ModelKey::base(large));
            let a = extract_activations(&mut load_model(ctx, regime, rep, &ka)?, &ka.id(), &data.test, &pre, &pool, plan.rsa.logits, Some(&layers))?;
            let b = extract_activations(&mut load_model(ctx, regime, rep, &kb)?, &kb.id(), &data.test, &pre, &pool, plan.rsa.logits, Some(&layers))?;
            for layer in layers {
                let deltas = class_conditioned_r2_gap(
                    &a,
                    &b,
                    layer,
                    &rep_.most_sensitive,
                    &rep_.least_sensitive,
                    plan.rsa.class_gap_images,
                    plan.rsa.class_gap_repetitions,
                    derive_seed(plan.rep_seed(rep), &format!("class-gap/{}/{layer}", regime.name())),
                )?;
                gaps.push(ClassGapRecord {
                    regime,
                    rep,
                    layer: layer.into(),
                    model_a: ka.id(),
                    model_b: kb.id(),
                    sensitive: rep_.most_sensitive.clone(),
                    insensitive: rep_.least_sensitive.clone(),
                    deltas,
                });
            }
        }
        _ => log::warn!(
            "{} rep {rep}: no disjoint sensitive/insensitive class lists; skipping class-conditioned RSA",
            regime.name()
        ),
    }
    Ok(RepRsa { rdms, r2, gaps })
}

pub(super) fn rsa(ctx: &PlanContext) -> Result<()> {
    let plan = ctx.plan;
    let evals: Option<EvalSummary> = ctx.summary(Stage::Eval)?;
    let mut summary = RsaSummary::default();
    for &regime in &plan.data.regimes {
        let data = Dataset::load(&ctx.regime_data(regime))?;
        let classes: Vec<usize> = (0..data.classes()).collect();
        let stimuli = sample_stimuli(
            &data.test,
            &classes,
            plan.rsa.images_per_class,
            derive_seed(plan.seed, &format!("rsa/{}", regime.name())),
        )?;
        let rep_list: Vec<usize> = reps(ctx).collect();
        let per_rep = parallel_map(&rep_list, ctx.threads, |&rep| rsa_rep(ctx, regime, &data, &stimuli, evals.as_ref(), rep))?;
        let mut grouped: BTreeMap<(usize, String, String), Vec<Rdm>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in per_rep {
            for (pos, (id, layer, rdm)) in r.rdms.into_iter().enumerate() {
                let k = (pos, id, layer);
                if !grouped.contains_key(&k) {
                    order.push(k.clone());
                }
                grouped.entry(k).or_default().push(rdm);
            }
            summary.r2.extend(r.r2);
            summary.class_gaps.extend(r.gaps);
        }
        let averaged: Vec<Rdm> = order
            .iter()
            .map(|k| {
                let mut avg = average_rdms(&grouped[k])?;
                avg.provenance.model = k.1.clone();
                avg.provenance.layer = k.2.clone();
                Ok(avg)
            })
            .collect::<Result<_>>()?;
        let second = second_order_rdm(&averaged)?;
        second.save(&ctx.stage_dir(Stage::Rsa).join(format!("{}.second_order.rdm", regime.name())))?;
        let coords = classical_mds(&second, 2)?;
        for (k, c) in order.iter().zip(coords) {
            summary.mds.push(MdsRecord {
                regime,
                model: k.1.clone(),
                layer: k.2.clone(),
                x: c[0],
                y: c[1],
            });
        }
    }
    write_stamped(&ctx.stage_dir(Stage::Rsa).join(SUMMARY_FILE), &ctx.meta, &summary)
}

pub(super) fn mirc(ctx: &PlanContext) -> Result<()> {
    let plan = ctx.plan;
    let regimes = &plan.mirc.regimes;
    let datasets = load_datasets(ctx, regimes)?;
    let mut jobs = Vec::new();
    for ri in 0..regimes.len() {
        for rep in reps(ctx) {
            for key in &plan.mirc.models {
                jobs.push((ri, rep, *key));
            }
        }
    }
    let results = parallel_map(&jobs, ctx.threads, |&(ri, rep, key)| {
        let (regime, data) = (regimes[ri], &datasets[ri]);
        let pre = data.preprocess_config();
        let mut m = load_model(ctx, regime, rep, &key)?;
        let mut picks = Vec::new();
        for c in 0..data.classes() {
            picks.extend(
                (0..data.test.len())
                    .filter(|&i| data.test.labels[i] == c)
                    .take(plan.mirc.images_per_class),
            );
        }
        let mut outcomes = Vec::new();
        let mut records = Vec::new();
        for i in picks {
            let x = data.test.eval_batch(&[i], &pre)?;
            let s = x.shape().to_vec();
            let image = Tensor::new(s[1..].to_vec(), x.data().to_vec())?;
            let mut clf = ModelPatchClassifier { model: &mut m, image };
            let class = data.test.labels[i];
            let outcome = mirc_search(&mut clf, s[3], s[2], class, plan.mirc.cap, &data.test.ids[i], &key.id())?;
            let record = match outcome.tree() {
                Some(t) => {
                    let valid = match validate_tree(t, &mut clf) {
                        Ok(()) => true,
                        Err(e) => {
                            log::error!("{e}");
                            false
                        }
                    };
                    MircImageRecord {
                        regime,
                        rep,
                        model: key,
                        image_id: t.image_id.clone(),
                        class,
                        applicable: true,
                        max_level: Some(t.max_level()),
                        mircs: t.mircs().len(),
                        evaluated: t.evaluated,
                        valid,
                    }
                }
                None => MircImageRecord {
                    regime,
                    rep,
                    model: key,
                    image_id: data.test.ids[i].clone(),
                    class,
                    applicable: false,
                    max_level: None,
                    mircs: 0,
                    evaluated: 1,
                    valid: true,
                },
            };
            outcomes.push(outcome);
            records.push(record);
        }
        let dir = ctx.rep_dir(Stage::Mirc, regime, rep);
        write_stamped(&dir.join(format!("{}.trees.json", key.id())), &ctx.meta, &outcomes)?;
        let trees: Vec<_> = outcomes.iter().filter_map(MircOutcome::tree).collect();
        let mut csv = ctx.meta.csv_comment() + "level,count\n";
        if !trees.is_empty() {
            let h = crate::mirc::max_mirc_level_histogram(&trees, plan.mirc.cap)?;
            for (l, n) in h.iter().enumerate() {
                csv += &format!("{l},{n}\n");
            }
        }
        std::fs::write(dir.join(format!("{}.histogram.csv", key.id())), csv)?;
        Ok(records)
    })?;
    let images = results.into_iter().flatten().collect();
    let summary = MircSummary {
        cap: plan.mirc.cap,
        images,
    };
    let invalid = summary.images.iter().filter(|r| !r.valid).count();
    if invalid > 0 {
        log::error!("{invalid} MIRC trees failed the post-hoc validity check");
    }
    write_stamped(&ctx.stage_dir(Stage::Mirc).join(SUMMARY_FILE), &ctx.meta, &summary)
}
