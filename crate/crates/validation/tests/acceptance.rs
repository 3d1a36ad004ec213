//! One line per acceptance criterion; exits non-zero if any fails.
//!
//! The desk-scale plan behind criteria 6, 8 and 9 is written to
//! `ESC_ACCEPTANCE_DIR` (default: a directory under the cargo target tmpdir).
//! Stages whose recorded keys and files still match are reused.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use esc::arch::{
    compute_theoretical_erf, count_params, match_width, measure_empirical_erf, make_weights_positive,
    theoretical_state, ArchitectureSpec, ComposedModel, FollowupKind, Network, PermutationMap, ScrambleKind,
    UnitIndex, Variant,
};
use esc::data::{Dataset, GenConfig, Regime};
use esc::experiment::ScrambleMode;
use esc::mirc::{mirc_search, side_sequence, PatchRect, Prediction};
use esc::plan::{self, read_stamped, ExperimentPlan, ModelKey, PlanStatus, RunStatus, Stage, SUMMARY_FILE};
use esc::plan::{EvalSummary, MircSummary, RsaSummary};
use esc::rsa::{classical_mds, compute_rdm, second_order_rdm, Rdm, RdmProvenance, ZeroVariance};
use esc::stats::{sign_test, wilcoxon_signed_rank, wilcoxon_with, Alternative, PMethod};
use esc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn erf_arithmetic() -> Check {
    for erf in [11, 23, 47, 95, 227] {
        let spec = ArchitectureSpec::full(erf, 1000).map_err(e2s)?;
        let got = compute_theoretical_erf(&spec, None);
        ensure(got == erf, format!("ERF{erf} network computes {got}"))?;
    }
    let spec = ArchitectureSpec::full(11, 1000).map_err(e2s)?;
    let composed = compute_theoretical_erf(&spec, Some(FollowupKind::Aggregating));
    ensure(composed == 235, format!("ERF11 + follow-up computes {composed}"))?;
    Ok("11, 23, 47, 95, 227 and ERF11 + follow-up = 235".into())
}

// ---------------------------------------------------------------- 2

fn narrow_desk(erf: usize, width: usize) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::desk(erf, 3, 1).unwrap();
    spec.stem.out_channels = width;
    for b in &mut spec.blocks {
        b.width = width;
    }
    spec
}

fn empirical_erf_containment() -> Check {
    let erfs = [7, 15, 31, 63];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for probe in 0..100 {
        let erf = erfs[probe % erfs.len()];
        let spec = narrow_desk(erf, 3);
        let mut net = Network::base(&spec, rng.random()).map_err(e2s)?;
        let size = spec.input_size;
        let input = Tensor::new(vec![1, 1, size, size], (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(e2s)?;
        let side = spec.output_size();
        let unit = UnitIndex {
            channel: rng.random_range(0..3),
            y: rng.random_range(0..side),
            x: rng.random_range(0..side),
        };
        let mask = measure_empirical_erf(&mut net, &input, unit, false).map_err(e2s)?;
        let rf = theoretical_state(&spec);
        ensure(mask.within(&rf, unit.y, unit.x), format!("probe {probe}: ERF{erf} unit {unit:?} leaks outside"))?;
    }
    let mut equal = 0;
    for erf in erfs {
        let spec = narrow_desk(erf, 2);
        let mut net = Network::base(&spec, 7).map_err(e2s)?;
        make_weights_positive(&mut net);
        let rf = theoretical_state(&spec);
        let size = spec.input_size as i64;
        let input = Tensor::full(&[1, 1, spec.input_size, spec.input_size], 0.5);
        for (uy, ux) in [(0, 0), (3, 4), (4, 4), (7, 7), (2, 6)] {
            let m = measure_empirical_erf(&mut net, &input, UnitIndex { channel: 0, y: uy, x: ux }, true)
                .map_err(e2s)?;
            let (y0, x0, y1, x1) = m.bounding_box().ok_or("empty support")?;
            let clip = |(a, b): (i64, i64)| (a.max(0) as usize, b.min(size - 1) as usize);
            let (ey0, ey1) = clip(rf.bounds(uy));
            let (ex0, ex1) = clip(rf.bounds(ux));
            ensure(
                (y0, x0, y1, x1) == (ey0, ex0, ey1, ex1),
                format!("ERF{erf} unit ({uy},{ux}): support {:?} vs square {:?}", (y0, x0, y1, x1), (ey0, ex0, ey1, ex1)),
            )?;
            equal += 1;
        }
    }
    Ok(format!("100 probes contained; {equal} identity-mode boxes equal the (image-clipped) theoretical square"))
}

// ---------------------------------------------------------------- 3

fn autodiff_suite() -> Check {
    let mut worst: f64 = 0.0;
    for (name, case) in common::GRADIENT_CASES {
        worst = worst.max(common::run_case(*case).map_err(|e| format!("{name}: {e}"))?);
    }
    Ok(format!(
        "{} cases x {} seeds, worst relative error {worst:.2e} (< {:.0e})",
        common::GRADIENT_CASES.len(),
        common::SEEDS,
        common::TOLERANCE
    ))
}

// ---------------------------------------------------------------- 4

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

fn permutation_invariance() -> Check {
    let cfg = GenConfig {
        regime: Regime::Shape,
        classes: 10,
        train_per_class: 1,
        test_per_class: 3,
        size: 64,
        seed: 4,
    };
    let data = Dataset::in_memory(&cfg).map_err(e2s)?;
    let idx: Vec<usize> = (0..data.test.len()).collect();
    let x = data.test.eval_batch(&idx, &data.preprocess_config()).map_err(e2s)?;
    let spec = ArchitectureSpec::desk(7, 10, 1).map_err(e2s)?;
    let base = ComposedModel::new_base(&spec, 1).map_err(e2s)?;
    let mut model = ComposedModel::compose(&base, Variant::BaseOneByOne, None, 2).map_err(e2s)?;
    let k = model.classes();
    let reference: Vec<usize> = model.predict(&x, None).map_err(e2s)?.data().chunks(k).map(argmax).collect();
    let side = spec.output_size();
    for s in 0..50 {
        let map = PermutationMap::random((side, side), ScrambleKind::Global, 1000 + s).map_err(e2s)?;
        let got: Vec<usize> = model.predict(&x, Some(&map)).map_err(e2s)?.data().chunks(k).map(argmax).collect();
        ensure(got == reference, format!("scrambling {s} changed an argmax"))?;
    }
    Ok(format!("{} samples, 50 global scramblings, argmax unchanged", idx.len()))
}

// ---------------------------------------------------------------- 5

fn brute_correlation_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    1.0 - sab / (saa * sbb).sqrt()
}

fn upper(r: &Rdm) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..r.n {
        for j in i + 1..r.n {
            v.push(r.values[i * r.n + j]);
        }
    }
    v
}

fn rsa_oracles(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let ids: Vec<String> = (0..9).map(|i| format!("s{i}")).collect();
    let mut rdms = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let vecs: Vec<Vec<f64>> = (0..9).map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = compute_rdm(&vecs, &ids, ZeroVariance::Strict).map_err(e2s)?;
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { 0.0 } else { brute_correlation_distance(&vecs[i], &vecs[j]) };
                worst = worst.max((r.values[i * 9 + j] - want).abs());
            }
        }
        rdms.push(r);
    }
    ensure(worst < 1e-10, format!("RDM differs from brute force by {worst:e}"))?;
    let second = second_order_rdm(&rdms).map_err(e2s)?;
    let mut worst2: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { 0.0 } else { brute_correlation_distance(&upper(&rdms[i]), &upper(&rdms[j])) };
            worst2 = worst2.max((second.values[i * 4 + j] - want).abs());
        }
    }
    ensure(worst2 < 1e-10, format!("second-order RDM differs by {worst2:e}"))?;
    let mut worst_mds: f64 = 0.0;
    for n in [4, 7, 12] {
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
        let values = (0..n * n).map(|k| d(pts[k / n], pts[k % n])).collect();
        let rdm = Rdm {
            n,
            values,
            provenance: RdmProvenance::default(),
        };
        let emb = classical_mds(&rdm, 2).map_err(e2s)?;
        for i in 0..n {
            for j in 0..n {
                let got = (emb[i][0] - emb[j][0]).hypot(emb[i][1] - emb[j][1]);
                worst_mds = worst_mds.max((got - d(pts[i], pts[j])).abs());
            }
        }
    }
    ensure(worst_mds < 1e-6, format!("MDS round trip off by {worst_mds:e}"))?;
    Ok(format!("RDM {worst:.1e}, second-order {worst2:.1e}, MDS {worst_mds:.1e}"))
}

/// Every MIRC of the corner-crop hierarchy, found by exhaustive recursion.
fn enumerate_mircs(
    classify: &dyn Fn(&PatchRect) -> usize,
    r: PatchRect,
    true_class: usize,
    cap: usize,
    out: &mut BTreeSet<(usize, usize, usize, usize)>,
) {
    let (cw, ch) = ((r.w as f64 * 0.75).floor() as usize, (r.h as f64 * 0.75).floor() as usize);
    if r.level == cap || cw < 2 || ch < 2 {
        out.insert((r.x0, r.y0, r.w, r.h));
        return;
    }
    let mut any = false;
    for (dx, dy) in [(0, 0), (r.w - cw, 0), (0, r.h - ch), (r.w - cw, r.h - ch)] {
        let c = PatchRect {
            x0: r.x0 + dx,
            y0: r.y0 + dy,
            w: cw,
            h: ch,
            level: r.level + 1,
        };
        if classify(&c) == true_class {
            any = true;
            enumerate_mircs(classify, c, true_class, cap, out);
        }
    }
    if !any {
        out.insert((r.x0, r.y0, r.w, r.h));
    }
}

fn mirc_oracle() -> Result<String, String> {
    let hash = |r: &PatchRect| {
        let mut h = (r.x0 * 73856093) ^ (r.y0 * 19349663) ^ (r.w * 83492791);
        h ^= h >> 13;
        h.wrapping_mul(0x9E3779B1)
    };
    let stubs: Vec<(&str, Box<dyn Fn(&PatchRect) -> usize>)> = vec![
        ("origin lineage", Box::new(|r: &PatchRect| usize::from(r.contains(0, 0)))),
        ("always correct", Box::new(|_: &PatchRect| 1)),
        ("large patches", Box::new(|r: &PatchRect| usize::from(r.w >= 40))),
        ("target point", Box::new(|r: &PatchRect| usize::from(r.contains(150, 40) && r.w >= 15))),
        ("hashed", Box::new(move |r: &PatchRect| usize::from(hash(r) % 3 != 0))),
    ];
    let mut total = 0;
    for (name, f) in &stubs {
        let mut want = BTreeSet::new();
        let root = PatchRect::root(224, 224);
        if f(&root) == 1 {
            enumerate_mircs(f.as_ref(), root, 1, 10, &mut want);
        }
        let mut clf = |r: &PatchRect| Prediction {
            class: f(r),
            probability: 0.5,
        };
        let out = mirc_search(&mut clf, 224, 224, 1, 10, "img", name).map_err(e2s)?;
        let got: BTreeSet<_> = out.tree().map_or_else(BTreeSet::new, |t| t.mircs().iter().map(|n| n.rect.key()).collect());
        ensure(got == want, format!("stub {name}: {} MIRCs vs {} enumerated", got.len(), want.len()))?;
        total += got.len();
    }
    Ok(format!("5 stubs, {total} MIRCs identical to enumeration"))
}

/// Ranks of |d| (average ranks for ties), doubled to stay integral.
fn doubled_ranks(d: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            ranks[order[k]] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

fn enumerated_p(x: &[f64], y: &[f64], alt: Alternative) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let ranks = doubled_ranks(&d);
    let observed: u64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let n = d.len();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..1 << n {
        let w: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        ge += u64::from(w >= observed);
        le += u64::from(w <= observed);
    }
    let total = (1u64 << n) as f64;
    match alt {
        Alternative::Greater => ge as f64 / total,
        Alternative::Less => le as f64 / total,
        Alternative::TwoSided => (2.0 * ge.min(le) as f64 / total).min(1.0),
    }
}

fn wilcoxon_oracle(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let alts = [Alternative::Greater, Alternative::Less, Alternative::TwoSided];
    let mut cases = 0;
    for n in 1..=12 {
        for trial in 0..10 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let mut y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if trial % 3 == 0 {
                // tied magnitudes
                for i in 0..n {
                    y[i] = x[i] - [0.5, -0.5, 0.25][i % 3];
                }
            }
            for alt in alts {
                let lib = wilcoxon_with(&x, &y, alt, PMethod::Exact).map_err(e2s)?.p_value;
                let want = enumerated_p(&x, &y, alt);
                ensure(lib == want, format!("n={n} {alt:?}: exact {lib} vs enumeration {want}"))?;
                cases += 1;
            }
        }
    }
    let mut gap: f64 = 0.0;
    for _ in 0..200 {
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.5)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        for alt in alts {
            let exact = wilcoxon_with(&x, &y, alt, PMethod::Exact).map_err(e2s)?.p_value;
            let approx = wilcoxon_with(&x, &y, alt, PMethod::NormalApprox).map_err(e2s)?.p_value;
            gap = gap.max((exact - approx).abs());
        }
    }
    ensure(gap < 0.02, format!("exact vs normal approximation gap {gap:.4} at n = 12"))?;
    Ok(format!("{cases} exact p-values equal enumeration; max |exact - approx| at n=12: {gap:.4}"))
}

fn oracle_equivalences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rsa_oracles(&mut rng)?;
    let b = mirc_oracle()?;
    let c = wilcoxon_oracle(&mut rng)?;
    Ok(format!("{a}; {b}; {c}"))
}

// ---------------------------------------------------------------- 7

fn parameter_matched_control() -> Check {
    let small = ArchitectureSpec::desk(7, 10, 1).map_err(e2s)?;
    let large = ArchitectureSpec::desk(63, 10, 1).map_err(e2s)?;
    let target = count_params(&large);
    let m = match_width(&small, target).map_err(e2s)?;
    let rel = (m.count as f64 - target as f64) / target as f64;
    ensure(rel.abs() <= 0.01, format!("matched count {} vs {target}", m.count))?;
    let erf = compute_theoretical_erf(&m.spec, None);
    ensure(erf == 7, format!("widened ERF is {erf}"))?;
    Ok(format!("ERF7 x{:.4}: {} vs {target} params ({:+.3}%), ERF 7", m.multiplier, m.count, 100.0 * rel))
}

// ---------------------------------------------------------------- desk plan

struct Desk {
    plan: ExperimentPlan,
    eval: EvalSummary,
    rsa: RsaSummary,
    mirc: MircSummary,
    minutes: f64,
    reused: usize,
}

fn desk_dir() -> PathBuf {
    std::env::var_os("ESC_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk"))
}

fn summary<T: serde::de::DeserializeOwned>(out: &Path, stage: Stage) -> Result<T, String> {
    Ok(read_stamped::<T>(&out.join(stage.dir()).join(SUMMARY_FILE)).map_err(e2s)?.body)
}

fn run_desk() -> Result<Desk, String> {
    let plan = ExperimentPlan::desk();
    let out = desk_dir();
    let t = Instant::now();
    let status: PlanStatus = plan::run_plan(&plan, &out).map_err(e2s)?;
    ensure(status.status == RunStatus::Ok, format!("desk plan failed: {:?}", status.error))?;
    Ok(Desk {
        eval: summary(&out, Stage::Eval)?,
        rsa: summary(&out, Stage::Rsa)?,
        mirc: summary(&out, Stage::Mirc)?,
        plan,
        minutes: t.elapsed().as_secs_f64() / 60.0,
        reused: status.skipped.len(),
    })
}

// ---------------------------------------------------------------- 6

fn mirc_geometry(desk: Option<&Desk>) -> Check {
    let seq = side_sequence(224, 10);
    let want = [168, 126, 94, 70, 52, 39, 29, 21, 15, 11];
    ensure(seq[1..] == want, format!("side sequence {seq:?}"))?;
    let desk = desk.ok_or("desk plan unavailable")?;
    let trees: Vec<_> = desk.mirc.images.iter().filter(|r| r.applicable).collect();
    let invalid = trees.iter().filter(|r| !r.valid).count();
    ensure(!trees.is_empty(), "no MIRC trees were produced")?;
    ensure(invalid == 0, format!("{invalid} of {} trees failed validation", trees.len()))?;
    Ok(format!("224 -> {want:?}; {} desk trees valid", trees.len()))
}

// ---------------------------------------------------------------- 8

const ALPHA: f64 = 0.05;

fn f1(desk: &Desk, regime: Regime, rep: usize, key: ModelKey, mode: ScrambleMode) -> Result<Vec<f64>, String> {
    desk.eval
        .find(regime, rep, &key, mode)
        .map(|r| r.f1.clone())
        .ok_or_else(|| format!("no evaluation of {} {regime:?} rep {rep} {mode:?}", key.id()))
}

/// Per-class values pooled over repetitions.
fn pooled(desk: &Desk, f: impl Fn(usize) -> Result<Vec<f64>, String>) -> Result<Vec<f64>, String> {
    let mut v = Vec::new();
    for rep in 0..desk.plan.train.repetitions {
        v.extend(f(rep)?);
    }
    Ok(v)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One-sided Wilcoxon that `x` exceeds `y`.
fn greater(label: &str, x: &[f64], y: &[f64]) -> (bool, String) {
    match wilcoxon_signed_rank(x, y, Alternative::Greater) {
        Ok(w) => (
            w.p_value < ALPHA,
            format!("{label}: mean {:.3} vs {:.3}, p = {:.4} (n = {})", mean(x), mean(y), w.p_value, w.n),
        ),
        Err(e) => (false, format!("{label}: {e}")),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

fn directional(desk: Option<&Desk>) -> Check {
    let desk = desk.ok_or("desk plan unavailable")?;
    let (small, large) = (desk.plan.smallest_erf(), desk.plan.largest_erf());
    let none = ScrambleMode::None;
    let global = ScrambleMode::Global;
    let local = ScrambleMode::Local {
        window: desk.plan.eval.local_window,
    };
    let key = |variant| ModelKey { erf: small, variant };
    let (base_s, base_l) = (ModelKey::base(small), ModelKey::base(large));
    let follow = key(Variant::BaseFollowup);
    let mut results = Vec::new();

    let gain = |regime| pooled(desk, |r| Ok(diff(&f1(desk, regime, r, base_l, none)?, &f1(desk, regime, r, base_s, none)?)));
    results.push(("a", greater("ERF gain shape > texture", &gain(Regime::Shape)?, &gain(Regime::Texture)?)));

    let shape = |k: ModelKey, m| pooled(desk, |r| f1(desk, Regime::Shape, r, k, m));
    results.push(("b", greater("aggregating > 1x1 follow-up", &shape(follow, none)?, &shape(key(Variant::BaseOneByOne), none)?)));
    results.push((
        "c",
        greater("unscrambled > scrambled-trained follow-up", &shape(follow, none)?, &shape(key(Variant::BaseFollowupScrambled), none)?),
    ));

    let drop = |regime| pooled(desk, |r| Ok(diff(&f1(desk, regime, r, follow, none)?, &f1(desk, regime, r, follow, global)?)));
    let (d1_ok, d1) = greater("global drop shape > texture", &drop(Regime::Shape)?, &drop(Regime::Texture)?);
    let (d2_ok, d2) = greater("local(2) f1 > global f1 on shape", &shape(follow, local)?, &shape(follow, global)?);
    results.push(("d", (d1_ok && d2_ok, format!("{d1}; {d2}"))));

    let levels = |key: ModelKey| -> HashMap<(usize, String), f64> {
        desk.mirc
            .images
            .iter()
            .filter(|r| r.regime == Regime::Shape && r.model == key && r.applicable)
            .map(|r| ((r.rep, r.image_id.clone()), r.max_level.unwrap_or(0) as f64))
            .collect()
    };
    let (ls, ll) = (levels(base_s), levels(base_l));
    let paired: BTreeMap<_, _> = ll.iter().filter_map(|(k, v)| ls.get(k).map(|s| (k.clone(), (*v, *s)))).collect();
    let e = if paired.is_empty() {
        (false, format!("no image is classified correctly by both ERF{small} and ERF{large}"))
    } else {
        let mut xl: Vec<f64> = paired.values().map(|p| p.0).collect();
        let mut xs: Vec<f64> = paired.values().map(|p| p.1).collect();
        let w = wilcoxon_signed_rank(&xl, &xs, Alternative::Greater);
        let (ml, msm) = (median(&mut xl), median(&mut xs));
        let p = w.as_ref().map_or_else(|e| e.to_string(), |w| format!("p = {:.4}{}", w.p_value, if w.small_sample { " (small sample)" } else { "" }));
        (
            ml >= msm,
            format!("median max-MIRC level ERF{large} {ml} vs ERF{small} {msm} over {} paired images, {p}", paired.len()),
        )
    };
    results.push(("e", e));

    let failed: Vec<&str> = results.iter().filter(|r| !r.1 .0).map(|r| r.0).collect();
    let detail = results.iter().map(|(k, (ok, s))| format!("({k}) {} {s}", if *ok { "ok" } else { "FAIL" })).collect::<Vec<_>>().join("; ");
    let detail = format!("{detail}; desk plan {:.1} min, {} stages reused", desk.minutes, desk.reused);
    if failed.is_empty() { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- 9

fn rsa_directional(desk: Option<&Desk>) -> Check {
    let desk = desk.ok_or("desk plan unavailable")?;
    let small = ModelKey::base(desk.plan.smallest_erf()).id();
    let large = ModelKey::base(desk.plan.largest_erf()).id();
    let follow = ModelKey {
        erf: desk.plan.smallest_erf(),
        variant: Variant::BaseFollowup,
    }
    .id();
    let reps = 0..desk.plan.train.repetitions;
    let r2 = |regime, rep, a: &str| {
        desk.rsa
            .r2_of(regime, rep, "gap", a, &large)
            .ok_or_else(|| format!("no GAP R2 for {a} vs {large} ({regime:?} rep {rep})"))
    };
    let mut shape = Vec::new();
    let mut texture = Vec::new();
    let mut with_follow = Vec::new();
    for rep in reps {
        shape.push(r2(Regime::Shape, rep, &small)?);
        texture.push(r2(Regime::Texture, rep, &small)?);
        with_follow.push(r2(Regime::Shape, rep, &follow)?);
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let (pos1, n1, p1) = sign_test(&texture, &shape, Alternative::Greater).map_err(e2s)?;
    let (pos2, n2, p2) = sign_test(&with_follow, &shape, Alternative::Greater).map_err(e2s)?;
    let detail = format!(
        "shape {} < texture {} in {pos1}/{n1} reps (sign p = {p1:.3}); with follow-up {} > {} in {pos2}/{n2} reps (sign p = {p2:.3})",
        fmt(&shape),
        fmt(&texture),
        fmt(&with_follow),
        fmt(&shape)
    );
    let reps = desk.plan.train.repetitions;
    if pos1 == reps && pos2 == reps { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- 10

fn report_csvs(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for name in plan::REPORT_FILES {
        let p = dir.join(Stage::Report.dir()).join(name);
        out.insert(name.to_string(), std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    Ok(out)
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?);
    let plan = ExperimentPlan::smoke();
    for dir in [a.path(), b.path()] {
        let status = plan::run_plan(&plan, dir).map_err(e2s)?;
        ensure(status.status == RunStatus::Ok, format!("smoke plan failed: {:?}", status.error))?;
    }
    let (ra, rb) = (report_csvs(a.path())?, report_csvs(b.path())?);
    for (name, text) in &ra {
        ensure(Some(text) == rb.get(name), format!("{name} differs between runs"))?;
    }
    Ok(format!("{} report CSVs byte-identical across two runs", ra.len()))
}

// ----------------------------------------------------------------

fn run(n: usize, title: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {title} [{secs:.1} s]: {detail}");
    result.is_ok()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut ok = Vec::new();
    ok.push(run(1, "ERF arithmetic", erf_arithmetic));
    ok.push(run(2, "empirical ERF containment", empirical_erf_containment));
    ok.push(run(3, "autodiff finite differences", autodiff_suite));
    ok.push(run(4, "1x1 follow-up permutation invariance", permutation_invariance));
    ok.push(run(5, "oracle equivalences", oracle_equivalences));
    let desk = {
        let t = Instant::now();
        let d = run_desk();
        match &d {
            Ok(d) => println!("desk plan ready in {:.1} min ({} stages reused) at {}", t.elapsed().as_secs_f64() / 60.0, d.reused, desk_dir().display()),
            Err(e) => println!("desk plan failed: {e}"),
        }
        d.ok()
    };
    ok.push(run(6, "MIRC geometry and tree validity", || mirc_geometry(desk.as_ref())));
    ok.push(run(7, "parameter-matched control", parameter_matched_control));
    ok.push(run(8, "directional reproduction", || directional(desk.as_ref())));
    ok.push(run(9, "RSA direction", || rsa_directional(desk.as_ref())));
    ok.push(run(10, "run-plan determinism", determinism));
    let passed = ok.iter().filter(|b| **b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
