use std::fmt::Write as _;

use super::svg::{bar_plot, line_plot};
use super::{EvalSummary, Meta, MircSummary, ModelKey, PlanContext, RsaSummary, Stage, TrainSummary};
use crate::arch::Variant;
use crate::error::{EscError, Result};
use crate::experiment::{set_intersection_table, ScrambleMode};
use crate::mirc::average_histograms;

pub const REPORT_FILES: [&str; 11] = [
    "erf_accuracy.csv",
    "followup_gain.csv",
    "test_scrambling.csv",
    "scrambling_ratios.csv",
    "sensitive_intersections.csv",
    "rdm_r2_erf.csv",
    "second_order_mds.csv",
    "rdm_r2_followup.csv",
    "class_r2_gap.csv",
    "mirc_levels_erf.csv",
    "mirc_levels_followup.csv",
];

struct Csv(String);

impl Csv {
    fn new(meta: &Meta, header: &str) -> Self {
        Self(meta.csv_comment() + header + "\n")
    }

    fn row(&mut self, fields: &[String]) {
        self.0 += &fields.join(",");
        self.0.push('\n');
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Writes every report CSV and plot from the stage summaries present in the
/// artifact directory.
pub fn write_reports(ctx: &PlanContext) -> Result<()> {
    let plan = ctx.plan;
    let meta = &ctx.meta;
    let missing = |s: Stage| EscError::Config(format!("report needs the {} summary", s.name()));
    let _train: TrainSummary = ctx.summary(Stage::Train)?.ok_or_else(|| missing(Stage::Train))?;
    let evals: EvalSummary = ctx.summary(Stage::Eval)?.ok_or_else(|| missing(Stage::Eval))?;
    let rsa: RsaSummary = ctx.summary(Stage::Rsa)?.unwrap_or_default();
    let mircs: MircSummary = ctx.summary(Stage::Mirc)?.unwrap_or_default();
    let dir = ctx.stage_dir(Stage::Report);
    std::fs::create_dir_all(&dir)?;
    let reps: Vec<usize> = (0..plan.train.repetitions).collect();
    let none = ScrambleMode::None;

    let mut erf = Csv::new(meta, "regime,erf,rep,accuracy,mean_f1");
    let mut series = Vec::new();
    for &regime in &plan.data.regimes {
        let mut pts = Vec::new();
        for &e in &plan.train.erfs {
            let mut accs = Vec::new();
            for &rep in &reps {
                if let Some(r) = evals.find(regime, rep, &ModelKey::base(e), none) {
                    erf.row(&[regime.name().into(), e.to_string(), rep.to_string(), f(r.accuracy), f(mean(&r.f1))]);
                    accs.push(r.accuracy);
                }
            }
            pts.push((e as f64, mean(&accs)));
        }
        series.push((regime.name().to_string(), pts));
    }
    std::fs::write(dir.join(REPORT_FILES[0]), erf.0)?;
    std::fs::write(
        dir.join("erf_accuracy.svg"),
        line_plot("Base accuracy by ERF", "ERF (pixels)", "test accuracy", &series),
    )?;

    let mut gain = Csv::new(meta, "regime,erf,variant,rep,base_accuracy,accuracy,gain");
    for &regime in &plan.data.regimes {
        for &e in &plan.train.followup_erfs {
            for &v in &plan.train.followups {
                for &rep in &reps {
                    let key = ModelKey { erf: e, variant: v };
                    if let (Some(b), Some(m)) = (
                        evals.find(regime, rep, &ModelKey::base(e), none),
                        evals.find(regime, rep, &key, none),
                    ) {
                        gain.row(&[
                            regime.name().into(),
                            e.to_string(),
                            v.tag().into(),
                            rep.to_string(),
                            f(b.accuracy),
                            f(m.accuracy),
                            f(m.accuracy - b.accuracy),
                        ]);
                    }
                }
            }
        }
    }
    std::fs::write(dir.join(REPORT_FILES[1]), gain.0)?;

    let mut scr = Csv::new(meta, "regime,model,rep,scramble,accuracy,drop");
    for e in &evals.evaluations {
        if e.model.variant == Variant::Base {
            continue;
        }
        let base = evals.find(e.regime, e.rep, &e.model, none).map_or(0.0, |r| r.accuracy);
        scr.row(&[
            e.regime.name().into(),
            e.model.id(),
            e.rep.to_string(),
            e.scramble.tag(),
            f(e.accuracy),
            f(base - e.accuracy),
        ]);
    }
    std::fs::write(dir.join(REPORT_FILES[2]), scr.0)?;

    let mut ratios = Csv::new(meta, "regime,model,rep,class,f1_unscrambled,f1_scrambled,ratio,eligible,list");
    for s in &evals.scrambling {
        for c in &s.report.classes {
            let list = match (
                s.report.most_sensitive.contains(&c.class),
                s.report.least_sensitive.contains(&c.class),
            ) {
                (true, true) => "both",
                (true, false) => "most",
                (false, true) => "least",
                _ => "",
            };
            ratios.row(&[
                s.regime.name().into(),
                s.model.id(),
                s.rep.to_string(),
                c.class.to_string(),
                f(c.f1_unscrambled),
                f(c.f1_scrambled),
                f(c.ratio),
                c.eligible.to_string(),
                list.into(),
            ]);
        }
    }
    std::fs::write(dir.join(REPORT_FILES[3]), ratios.0)?;

    let mut inter = Csv::new(meta, "regime,list,model_a,model_b,count");
    for &regime in &plan.data.regimes {
        let recs: Vec<_> = evals.scrambling.iter().filter(|s| s.regime == regime).collect();
        if recs.len() < 2 {
            continue;
        }
        let labels: Vec<String> = recs.iter().map(|s| format!("{}@rep{}", s.model.id(), s.rep)).collect();
        for (name, lists) in [
            ("most", recs.iter().map(|s| s.report.most_sensitive.clone()).collect::<Vec<_>>()),
            ("least", recs.iter().map(|s| s.report.least_sensitive.clone()).collect()),
        ] {
            let table = set_intersection_table(&lists, plan.data.classes)?;
            for (i, row) in table.iter().enumerate() {
                for (j, n) in row.iter().enumerate() {
                    inter.row(&[regime.name().into(), name.into(), labels[i].clone(), labels[j].clone(), n.to_string()]);
                }
            }
        }
    }
    std::fs::write(dir.join(REPORT_FILES[4]), inter.0)?;

    let bases: Vec<String> = plan.train.erfs.iter().map(|e| ModelKey::base(*e).id()).collect();
    let mut r2e = Csv::new(meta, "regime,rep,layer,model_a,model_b,r2");
    for r in rsa.r2.iter().filter(|r| bases.contains(&r.model_a) && bases.contains(&r.model_b)) {
        r2e.row(&[r.regime.name().into(), r.rep.to_string(), r.layer.clone(), r.model_a.clone(), r.model_b.clone(), f(r.r2)]);
    }
    std::fs::write(dir.join(REPORT_FILES[5]), r2e.0)?;

    let mut mds = Csv::new(meta, "regime,model,layer,x,y");
    for m in &rsa.mds {
        mds.row(&[m.regime.name().into(), m.model.clone(), m.layer.clone(), f(m.x), f(m.y)]);
    }
    std::fs::write(dir.join(REPORT_FILES[6]), mds.0)?;

    let reference = ModelKey::base(plan.largest_erf()).id();
    let mut r2f = Csv::new(meta, "regime,rep,layer,model,reference,r2");
    for &regime in &plan.data.regimes {
        for &rep in &reps {
            for layer in [crate::rsa::GAP_LAYER, crate::rsa::SOFTMAX_LAYER] {
                for &e in &plan.train.followup_erfs {
                    let mut models = vec![ModelKey::base(e)];
                    models.extend(plan.train.followups.iter().map(|&variant| ModelKey { erf: e, variant }));
                    for m in models {
                        if let Some(v) = rsa.r2_of(regime, rep, layer, &m.id(), &reference) {
                            r2f.row(&[regime.name().into(), rep.to_string(), layer.into(), m.id(), reference.clone(), f(v)]);
                        }
                    }
                }
            }
        }
    }
    std::fs::write(dir.join(REPORT_FILES[7]), r2f.0)?;

    let mut gap = Csv::new(meta, "regime,rep,layer,model_a,model_b,repetition,delta_r2");
    for g in &rsa.class_gaps {
        for (i, d) in g.deltas.iter().enumerate() {
            gap.row(&[
                g.regime.name().into(),
                g.rep.to_string(),
                g.layer.clone(),
                g.model_a.clone(),
                g.model_b.clone(),
                i.to_string(),
                f(*d),
            ]);
        }
    }
    std::fs::write(dir.join(REPORT_FILES[8]), gap.0)?;

    for (file, followups) in [(REPORT_FILES[9], false), (REPORT_FILES[10], true)] {
        let models: Vec<ModelKey> = plan
            .mirc
            .models
            .iter()
            .copied()
            .filter(|m| (m.variant != Variant::Base) == followups || (followups && m.erf == plan.smallest_erf() && m.variant == Variant::Base))
            .collect();
        let mut header = String::from("regime,model,level");
        for r in &reps {
            write!(header, ",count_rep{r}").expect("string write");
        }
        header += ",mean_fraction,std_fraction";
        let mut csv = Csv::new(meta, &header);
        let mut series = Vec::new();
        for &regime in &plan.mirc.regimes {
            for m in &models {
                let hists: Vec<Vec<usize>> = reps
                    .iter()
                    .map(|&rep| {
                        let mut h = vec![0usize; mircs.cap + 1];
                        for r in mircs.images.iter().filter(|r| r.regime == regime && r.rep == rep && r.model == *m) {
                            if let Some(l) = r.max_level {
                                h[l.min(mircs.cap)] += 1;
                            }
                        }
                        h
                    })
                    .collect();
                let (mu, sd) = average_histograms(&hists);
                for l in 0..=mircs.cap.min(mu.len().saturating_sub(1)) {
                    let mut row = vec![regime.name().to_string(), m.id(), l.to_string()];
                    row.extend(hists.iter().map(|h| h[l].to_string()));
                    row.push(f(mu[l]));
                    row.push(f(sd[l]));
                    csv.row(&row);
                }
                series.push((format!("{}/{}", regime.name(), m.id()), mu));
            }
        }
        std::fs::write(dir.join(file), csv.0)?;
        let cats: Vec<String> = (0..=mircs.cap).map(|l| l.to_string()).collect();
        std::fs::write(
            dir.join(file.replace(".csv", ".svg")),
            bar_plot("Maximum MIRC level per image", "level", "fraction of images", &cats, &series),
        )?;
    }
    Ok(())
}
