use serde::{Deserialize, Serialize};

use crate::error::{EscError, Result};

/// Per-class precision/recall/f1 from argmax predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub accuracy: f64,
}

impl ClassMetrics {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(EscError::Shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut tp = vec![0usize; classes];
        let mut predicted = vec![0usize; classes];
        let mut support = vec![0usize; classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(EscError::Label {
                    label: p.max(y),
                    classes,
                });
            }
            predicted[p] += 1;
            support[y] += 1;
            if p == y {
                tp[y] += 1;
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision: Vec<f64> = (0..classes).map(|c| ratio(tp[c], predicted[c])).collect();
        let recall: Vec<f64> = (0..classes).map(|c| ratio(tp[c], support[c])).collect();
        let f1 = precision
            .iter()
            .zip(&recall)
            .map(|(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
            .collect();
        Ok(Self {
            precision,
            recall,
            f1,
            support,
            accuracy: ratio(tp.iter().sum(), labels.len()),
        })
    }

    pub fn classes(&self) -> usize {
        self.f1.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for c in 0..self.classes() {
            s += &format!(
                "{c},{:.6},{:.6},{:.6},{}\n",
                self.precision[c], self.recall[c], self.f1[c], self.support[c]
            );
        }
        s
    }
}

pub const ELIGIBILITY_THRESHOLD: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScramble {
    pub class: usize,
    pub f1_unscrambled: f64,
    pub f1_scrambled: f64,
    pub ratio: f64,
    pub eligible: bool,
}

/// Sensitivity of each class's f1 to scrambling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScramblingReport {
    pub classes: Vec<ClassScramble>,
    pub threshold: f64,
    /// Eligible classes ordered by ascending ratio.
    pub ranking: Vec<usize>,
    /// Lowest-ratio (most scrambling-sensitive) classes.
    pub most_sensitive: Vec<usize>,
    /// Highest-ratio classes, highest first.
    pub least_sensitive: Vec<usize>,
}

impl ScramblingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,f1_unscrambled,f1_scrambled,ratio,eligible\n");
        for c in &self.classes {
            s += &format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                c.class, c.f1_unscrambled, c.f1_scrambled, c.ratio, c.eligible
            );
        }
        s
    }
}

/// Size of the least/most-sensitive lists: 20% of eligible classes, at
/// least one when any class is eligible.
pub fn top_fraction(eligible: usize) -> usize {
    if eligible == 0 {
        0
    } else {
        ((eligible as f64 * 0.2).ceil() as usize).max(1)
    }
}

pub fn scrambling_report(before: &ClassMetrics, after: &ClassMetrics, threshold: f64) -> Result<ScramblingReport> {
    if before.classes() != after.classes() {
        return Err(EscError::Shape(format!(
            "class sets differ: {} vs {}",
            before.classes(),
            after.classes()
        )));
    }
    let classes: Vec<ClassScramble> = (0..before.classes())
        .map(|c| {
            let (b, a) = (before.f1[c], after.f1[c]);
            ClassScramble {
                class: c,
                f1_unscrambled: b,
                f1_scrambled: a,
                ratio: if b > 0.0 { a / b } else { 0.0 },
                eligible: b > threshold,
            }
        })
        .collect();
    let mut ranking: Vec<&ClassScramble> = classes.iter().filter(|c| c.eligible).collect();
    ranking.sort_by(|x, y| x.ratio.total_cmp(&y.ratio).then(x.class.cmp(&y.class)));
    if ranking.is_empty() {
        log::warn!("no class exceeds the f1 threshold {threshold}; sensitivity lists are empty");
    }
    let k = top_fraction(ranking.len());
    let mut descending = ranking.clone();
    descending.sort_by(|x, y| y.ratio.total_cmp(&x.ratio).then(x.class.cmp(&y.class)));
    let least_sensitive = descending.iter().take(k).map(|c| c.class).collect();
    let ranking: Vec<usize> = ranking.iter().map(|c| c.class).collect();
    Ok(ScramblingReport {
        most_sensitive: ranking[..k].to_vec(),
        least_sensitive,
        ranking,
        classes,
        threshold,
    })
}

/// Pairwise `|list_i ∩ list_j|` over class lists drawn from one universe of
/// `classes` labels.
pub fn set_intersection_table(lists: &[Vec<usize>], classes: usize) -> Result<Vec<Vec<usize>>> {
    if lists.len() < 2 {
        return Err(EscError::Config("intersection table needs at least two lists".into()));
    }
    if let Some(bad) = lists.iter().flatten().find(|c| **c >= classes) {
        return Err(EscError::Label { label: *bad, classes });
    }
    Ok(lists
        .iter()
        .map(|a| {
            lists
                .iter()
                .map(|b| a.iter().filter(|c| b.contains(c)).count())
                .collect()
        })
        .collect())
}

/// Intersection table of the most-sensitive lists of several reports.
pub fn report_intersections(reports: &[ScramblingReport]) -> Result<Vec<Vec<usize>>> {
    let n = reports.first().map_or(0, |r| r.classes.len());
    if reports.iter().any(|r| r.classes.len() != n) {
        return Err(EscError::Config("reports cover different class universes".into()));
    }
    let lists: Vec<Vec<usize>> = reports.iter().map(|r| r.most_sensitive.clone()).collect();
    set_intersection_table(&lists, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics_with_f1(f1: &[f64]) -> ClassMetrics {
        ClassMetrics {
            precision: f1.to_vec(),
            recall: f1.to_vec(),
            f1: f1.to_vec(),
            support: vec![1; f1.len()],
            accuracy: 0.0,
        }
    }

    #[test]
    fn metrics_by_hand() {
        // labels 0 0 1 1 2, predictions 0 1 1 1 0
        let m = ClassMetrics::from_predictions(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 2], 3).unwrap();
        assert_eq!(m.precision, vec![0.5, 2.0 / 3.0, 0.0]);
        assert_eq!(m.recall, vec![0.5, 1.0, 0.0]);
        assert!((m.f1[1] - 0.8).abs() < 1e-12);
        assert_eq!(m.f1[2], 0.0);
        assert!((m.accuracy - 0.6).abs() < 1e-12);
        assert!(ClassMetrics::from_predictions(&[3], &[0], 3).is_err());
    }

    #[test]
    fn ratios_and_eligibility() {
        let before = metrics_with_f1(&[0.8, 0.8, 0.6, 0.9, 1.0]);
        let after = metrics_with_f1(&[0.4, 0.8, 0.1, 0.9, 0.3]);
        let r = scrambling_report(&before, &after, ELIGIBILITY_THRESHOLD).unwrap();
        assert_eq!(r.classes[0].ratio, 0.5);
        assert_eq!(r.classes[1].ratio, 1.0);
        assert!(!r.classes[2].eligible);
        assert_eq!(r.ranking, vec![4, 0, 1, 3]);
        assert_eq!(r.most_sensitive, vec![4]);
        assert_eq!(r.least_sensitive, vec![1]);
    }

    #[test]
    fn no_eligible_classes_gives_empty_lists() {
        let m = metrics_with_f1(&[0.1, 0.2]);
        let r = scrambling_report(&m, &m, 0.75).unwrap();
        assert!(r.most_sensitive.is_empty() && r.ranking.is_empty());
    }

    #[test]
    fn intersections() {
        let t = set_intersection_table(&[vec![0, 1, 2], vec![1, 2, 3]], 4).unwrap();
        assert_eq!(t, vec![vec![3, 2], vec![2, 3]]);
        let same = set_intersection_table(&[vec![0, 1], vec![1, 0], vec![0, 1]], 4).unwrap();
        assert!(same.iter().flatten().all(|v| *v == 2));
        let disjoint = set_intersection_table(&[vec![0], vec![1]], 2).unwrap();
        assert_eq!(disjoint[0][1], 0);
        assert!(set_intersection_table(&[vec![0], vec![5]], 2).is_err());
    }
}
