use super::spec::{ArchitectureSpec, FollowupKind, UnitSpec};
use crate::error::{EscError, Result};

/// Weights plus bias of one `k x k` convolution.
pub fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn conv_bn_params(k: usize, cin: usize, cout: usize) -> usize {
    conv_params(k, cin, cout) + 2 * cout
}

fn unit_params(u: &UnitSpec) -> usize {
    let mut n = conv_bn_params(1, u.in_channels, u.width)
        + conv_bn_params(u.kernel, u.width, u.width)
        + conv_bn_params(1, u.width, u.width);
    if u.projection {
        n += conv_bn_params(1, u.in_channels, u.width);
    }
    n
}

/// Trainable parameters of a base network: convolutions with bias,
/// normalization scale/shift, and the dense head.
pub fn count_params(spec: &ArchitectureSpec) -> usize {
    let stem = conv_bn_params(spec.stem.kernel, spec.in_channels, spec.stem.out_channels);
    let units: usize = spec.units().iter().map(unit_params).sum();
    let head = spec.output_channels() * spec.head.classes + spec.head.classes;
    stem + units + head
}

pub fn count_followup_params(kind: FollowupKind, channels: usize, classes: usize) -> usize {
    kind.units(channels).iter().map(unit_params).sum::<usize>() + channels * classes + classes
}

/// Result of a width search.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthMatch {
    pub spec: ArchitectureSpec,
    pub multiplier: f64,
    pub count: usize,
    pub target: usize,
}

impl WidthMatch {
    pub fn relative_error(&self) -> f64 {
        (self.count as f64 - self.target as f64).abs() / self.target as f64
    }
}

/// Multipliers at which at least one rounded width changes, within `[lo, hi]`.
fn breakpoints(spec: &ArchitectureSpec, lo: f64, hi: f64) -> Vec<f64> {
    let mut widths: Vec<usize> = spec.blocks.iter().map(|b| b.width).collect();
    widths.push(spec.stem.out_channels);
    let mut out = vec![lo, hi];
    for w in widths {
        let w = w as f64;
        let first = (lo * w - 0.5).floor().max(0.0) as usize;
        let last = (hi * w - 0.5).ceil() as usize;
        for j in first..=last {
            // just past the rounding threshold (j + 0.5) / w
            let m = (j as f64 + 0.5) / w + 1e-9;
            if m >= lo && m <= hi {
                out.push(m);
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Scales every width of `spec` by one global multiplier so its parameter
/// count lands within 1% of `target`. Filter sizes and strides, hence the
/// theoretical ERF, are unchanged.
pub fn match_width(spec: &ArchitectureSpec, target: usize) -> Result<WidthMatch> {
    spec.validate()?;
    if target == 0 {
        return Err(EscError::Config("target parameter count must be positive".into()));
    }
    let count_at = |m: f64| count_params(&spec.widened(m));
    let (mut lo, mut hi) = (1e-3, 1.0);
    while count_at(hi) < target {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(EscError::Unreachable {
                target,
                nearest: count_at(hi),
            });
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if count_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // rounding makes the count piecewise constant; examine every width
    // breakpoint around the bisection result
    let span = 0.1 * hi;
    let best = breakpoints(spec, (hi - span).max(1e-3), hi + span)
        .into_iter()
        .map(|m| (m, count_at(m)))
        .min_by(|a, b| {
            let da = a.1.abs_diff(target);
            let db = b.1.abs_diff(target);
            da.cmp(&db).then(a.0.total_cmp(&b.0))
        })
        .expect("non-empty candidate set");
    let (multiplier, count) = best;
    let out = WidthMatch {
        spec: spec.widened(multiplier),
        multiplier,
        count,
        target,
    };
    if out.relative_error() > 0.01 {
        return Err(EscError::Unreachable {
            target,
            nearest: count,
        });
    }
    Ok(out)
}
