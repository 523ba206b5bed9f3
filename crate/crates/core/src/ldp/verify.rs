//! Exact enumeration of the two-layer mechanism and brute-force checks of
//! its privacy bound and budget-allocation properties.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{allocate_budget, rr_probability, value_slot, BudgetSplit, LdpError};
use crate::domain::{CategoryId, CategoryTable, PrivacyBudget};

/// Upper bound on `K₁ · max K₂` for exact enumeration.
pub const MAX_ENUMERATION: usize = 10_000;

const BOUND_SLACK: f64 = 1e-9;

/// A mechanism whose output distribution can be enumerated exactly.
///
/// Inputs and outputs are `(category index, slot)` pairs over the table's
/// surrogate pools. The returned table is indexed `[category][slot]`.
pub trait Mechanism {
    fn output_distribution(
        &self,
        table: &CategoryTable,
        split: BudgetSplit,
        category: usize,
        slot: usize,
    ) -> Result<Vec<Vec<f64>>, LdpError>;
}

/// The production mechanism: category RR followed by slot RR.
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoLayerRr;

impl Mechanism for TwoLayerRr {
    fn output_distribution(
        &self,
        table: &CategoryTable,
        split: BudgetSplit,
        category: usize,
        slot: usize,
    ) -> Result<Vec<Vec<f64>>, LdpError> {
        let k1 = table.len();
        let p1 = rr_probability(split.epsilon1, k1)?;
        let q1 = p1 * (-split.epsilon1).exp();
        table
            .categories()
            .iter()
            .enumerate()
            .map(|(c, cat)| {
                let k2 = cat.value_domain().len();
                let p2 = rr_probability(split.epsilon2, k2)?;
                let q2 = p2 * (-split.epsilon2).exp();
                let first = if c == category { p1 } else { q1 };
                let truth = slot % k2;
                Ok((0..k2)
                    .map(|s| first * if s == truth { p2 } else { q2 })
                    .collect())
            })
            .collect()
    }
}

fn check_guard(table: &CategoryTable) -> Result<(), LdpError> {
    let max_k2 = table
        .categories()
        .iter()
        .map(|c| c.value_domain().len())
        .max()
        .unwrap_or(0);
    let size = table.len() * max_k2;
    if size > MAX_ENUMERATION {
        return Err(LdpError::DomainGuard(size));
    }
    Ok(())
}

/// A (category, value) point of the mechanism's input or output space.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outcome {
    pub category: CategoryId,
    pub value: String,
}

fn outcome(table: &CategoryTable, category: usize, slot: usize) -> Outcome {
    let cat = &table.categories()[category];
    Outcome {
        category: cat.id().clone(),
        value: cat.value_domain()[slot].clone(),
    }
}

/// Joint output distribution of `mechanism` for one input, keyed by outcome.
pub fn joint_distribution<M: Mechanism + ?Sized>(
    mechanism: &M,
    table: &CategoryTable,
    split: BudgetSplit,
    category: usize,
    slot: usize,
) -> Result<BTreeMap<Outcome, f64>, LdpError> {
    check_guard(table)?;
    let dist = mechanism.output_distribution(table, split, category, slot)?;
    let mut out = BTreeMap::new();
    for (c, row) in dist.iter().enumerate() {
        for (s, &p) in row.iter().enumerate() {
            out.insert(outcome(table, c, s), p);
        }
    }
    Ok(out)
}

/// Exact output distribution of the two-layer mechanism for an entity of
/// `category` with the given surface, using the table weight for the split.
pub fn mechanism_distribution(
    category: &CategoryId,
    surface: &str,
    table: &CategoryTable,
    budget: &PrivacyBudget,
) -> Result<BTreeMap<Outcome, f64>, LdpError> {
    let index = table
        .index_of(category)
        .ok_or_else(|| LdpError::UnknownCategory(category.clone()))?;
    let split = allocate_budget(table.categories()[index].weight(), budget)?;
    let slot = value_slot(table, category, surface)?;
    joint_distribution(&TwoLayerRr, table, split, index, slot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub input_a: Outcome,
    pub input_b: Outcome,
    pub output: Outcome,
}

/// Result of one grid point of the bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub epsilon_total: f64,
    pub alpha: f64,
    /// Uniform weight applied to every input; `None` means per-category table weights.
    pub weight: Option<f64>,
    /// Largest `ln(P[out|a] / P[out|b])`; `None` when some ratio is unbounded.
    pub max_log_ratio: Option<f64>,
    pub witness: Option<Witness>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub records: Vec<BoundRecord>,
    pub passed: bool,
}

impl BoundReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let weight = r.weight.map_or("table".to_string(), |w| format!("{w:.2}"));
            let ratio = r
                .max_log_ratio
                .map_or("unbounded".to_string(), |x| format!("{x:.12}"));
            let _ = write!(
                s,
                "{} eps={} alpha={} w={} max_log_ratio={}",
                if r.passed { "PASS" } else { "FAIL" },
                r.epsilon_total,
                r.alpha,
                weight,
                ratio
            );
            if let (false, Some(w)) = (r.passed, &r.witness) {
                let _ = write!(
                    s,
                    " witness=({}:{:?}) vs ({}:{:?}) -> ({}:{:?})",
                    w.input_a.category,
                    w.input_a.value,
                    w.input_b.category,
                    w.input_b.value,
                    w.output.category,
                    w.output.value
                );
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "overall: {}",
            if self.passed { "PASS" } else { "FAILED" }
        );
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn inputs(table: &CategoryTable) -> Vec<(usize, usize)> {
    table
        .categories()
        .iter()
        .enumerate()
        .flat_map(|(c, cat)| (0..cat.value_domain().len()).map(move |s| (c, s)))
        .collect()
}

fn bound_record<M: Mechanism + ?Sized>(
    mechanism: &M,
    table: &CategoryTable,
    budget: &PrivacyBudget,
    weight: Option<f64>,
) -> Result<BoundRecord, LdpError> {
    check_guard(table)?;
    let inputs = inputs(table);
    let mut dists = Vec::with_capacity(inputs.len());
    for &(c, s) in &inputs {
        let w = weight.unwrap_or_else(|| table.categories()[c].weight());
        let split = allocate_budget(w, budget)?;
        let dist: Vec<f64> = mechanism
            .output_distribution(table, split, c, s)?
            .into_iter()
            .flatten()
            .collect();
        dists.push(dist);
    }
    let outputs = inputs.clone();

    let mut best = 0.0f64;
    let mut witness = None;
    for (o, &(oc, os)) in outputs.iter().enumerate() {
        let (mut hi, mut lo) = (0usize, 0usize);
        for i in 1..dists.len() {
            if dists[i][o] > dists[hi][o] {
                hi = i;
            }
            if dists[i][o] < dists[lo][o] {
                lo = i;
            }
        }
        let (a, b) = (dists[hi][o], dists[lo][o]);
        if a == 0.0 {
            continue;
        }
        let ratio = if b == 0.0 {
            f64::INFINITY
        } else {
            (a / b).ln()
        };
        if ratio > best || witness.is_none() {
            best = best.max(ratio);
            witness = Some(Witness {
                input_a: outcome(table, inputs[hi].0, inputs[hi].1),
                input_b: outcome(table, inputs[lo].0, inputs[lo].1),
                output: outcome(table, oc, os),
            });
        }
    }
    let bound = budget.epsilon_total() + BOUND_SLACK;
    Ok(BoundRecord {
        epsilon_total: budget.epsilon_total(),
        alpha: budget.alpha(),
        weight,
        max_log_ratio: best.is_finite().then_some(best),
        witness,
        passed: best <= bound,
    })
}

/// Brute-force check of `P[out|x] ≤ e^ε · P[out|x']` over every input pair
/// and output, with every input sharing the split for weight `w`.
pub fn verify_ldp_bound_with<M: Mechanism + ?Sized>(
    mechanism: &M,
    table: &CategoryTable,
    budget: &PrivacyBudget,
    weights: &[f64],
) -> Result<BoundReport, LdpError> {
    let records = weights
        .iter()
        .map(|&w| bound_record(mechanism, table, budget, Some(w)))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = records.iter().all(|r| r.passed);
    Ok(BoundReport { records, passed })
}

pub fn verify_ldp_bound(
    table: &CategoryTable,
    budget: &PrivacyBudget,
    weights: &[f64],
) -> Result<BoundReport, LdpError> {
    verify_ldp_bound_with(&TwoLayerRr, table, budget, weights)
}

/// Same check with each input using its own category's weight. Inputs of
/// different categories then carry different splits, so the attained ratio
/// can exceed ε_total; the record reports it without asserting the bound.
pub fn verify_ldp_bound_table_weights(
    table: &CategoryTable,
    budget: &PrivacyBudget,
) -> Result<BoundRecord, LdpError> {
    bound_record(&TwoLayerRr, table, budget, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRecord {
    pub epsilon_total: f64,
    pub alpha: f64,
    pub points: usize,
    /// Smallest `ε₁(w_{i+1}) - ε₁(w_i)` along the grid.
    pub min_epsilon1_step: f64,
    pub epsilon1_increasing: bool,
    pub epsilon2_decreasing: bool,
    pub boundaries_exact: bool,
    pub conservation_exact: bool,
    /// `ε₁ = ε_total · w` pointwise up to one rounding of the exact-sum
    /// construction; only checked on the α = 1 slice.
    pub linear_when_alpha_one: Option<bool>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub records: Vec<MonotonicityRecord>,
    pub passed: bool,
}

impl MonotonicityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{} eps={} alpha={} points={} min_step={:.3e} increasing={} decreasing={} boundaries={} conservation={}{}",
                if r.passed { "PASS" } else { "FAIL" },
                r.epsilon_total,
                r.alpha,
                r.points,
                r.min_epsilon1_step,
                r.epsilon1_increasing,
                r.epsilon2_decreasing,
                r.boundaries_exact,
                r.conservation_exact,
                r.linear_when_alpha_one
                    .map_or(String::new(), |l| format!(" linear={l}")),
            );
        }
        let _ = writeln!(
            s,
            "overall: {}",
            if self.passed { "PASS" } else { "FAILED" }
        );
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Checks the allocation rule along each α slice of the weight grid.
pub fn verify_monotonicity(
    epsilon_total: f64,
    weights: &[f64],
    alphas: &[f64],
) -> Result<MonotonicityReport, LdpError> {
    let mut records = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let budget = PrivacyBudget::new(epsilon_total, alpha)
            .map_err(|_| LdpError::InvalidEpsilon(epsilon_total))?;
        let splits = weights
            .iter()
            .map(|&w| allocate_budget(w, &budget))
            .collect::<Result<Vec<_>, _>>()?;

        let mut min_step = f64::INFINITY;
        let mut increasing = true;
        let mut decreasing = true;
        for pair in splits.windows(2) {
            let step = pair[1].epsilon1 - pair[0].epsilon1;
            min_step = min_step.min(step);
            increasing &= step > 0.0;
            decreasing &= pair[1].epsilon2 < pair[0].epsilon2;
        }
        let mut boundaries = true;
        for (&w, s) in weights.iter().zip(&splits) {
            if w == 1.0 {
                boundaries &= s.epsilon1 == epsilon_total && s.epsilon2 == 0.0;
            }
            if w == 0.0 {
                boundaries &= s.epsilon1 == 0.0 && s.epsilon2 == epsilon_total;
            }
        }
        let conservation = splits
            .iter()
            .all(|s| s.epsilon1 + s.epsilon2 == epsilon_total);
        let linear = (alpha == 1.0).then(|| {
            weights.iter().zip(&splits).all(|(&w, s)| {
                (s.epsilon1 - epsilon_total * w).abs() <= f64::EPSILON * epsilon_total
            })
        });
        let passed =
            increasing && decreasing && boundaries && conservation && linear.unwrap_or(true);
        records.push(MonotonicityRecord {
            epsilon_total,
            alpha,
            points: weights.len(),
            min_epsilon1_step: min_step,
            epsilon1_increasing: increasing,
            epsilon2_decreasing: decreasing,
            boundaries_exact: boundaries,
            conservation_exact: conservation,
            linear_when_alpha_one: linear,
            passed,
        });
    }
    let passed = records.iter().all(|r| r.passed);
    Ok(MonotonicityReport { records, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Entity;
    use crate::ldp::{entity_stream, perturb_entity};

    fn small_table() -> CategoryTable {
        CategoryTable::default_table()
            .restricted_to(&["PERSON", "LOCATION", "NATIONALITY"])
            .unwrap()
    }

    fn budget(e: f64, a: f64) -> PrivacyBudget {
        PrivacyBudget::new(e, a).unwrap()
    }

    /// Value layer with the retention probability inflated 1.5×.
    struct InflatedValueLayer;

    impl Mechanism for InflatedValueLayer {
        fn output_distribution(
            &self,
            table: &CategoryTable,
            split: BudgetSplit,
            category: usize,
            slot: usize,
        ) -> Result<Vec<Vec<f64>>, LdpError> {
            let k1 = table.len();
            let p1 = rr_probability(split.epsilon1, k1)?;
            let q1 = (1.0 - p1) / (k1 - 1) as f64;
            Ok(table
                .categories()
                .iter()
                .enumerate()
                .map(|(c, cat)| {
                    let k2 = cat.value_domain().len();
                    let p2 = (1.5 * rr_probability(split.epsilon2, k2).unwrap()).min(1.0);
                    let q2 = (1.0 - p2) / (k2 - 1) as f64;
                    let first = if c == category { p1 } else { q1 };
                    (0..k2)
                        .map(|s| first * if s == slot % k2 { p2 } else { q2 })
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn distributions_sum_to_one() {
        let table = CategoryTable::default_table();
        for c in table.categories() {
            let d = mechanism_distribution(c.id(), "Tokyo", &table, &budget(1.0, 0.5)).unwrap();
            assert_eq!(d.len(), 32);
            assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_budget_is_uniform() {
        let table = small_table();
        let d =
            mechanism_distribution(&"PERSON".into(), "Alice", &table, &PrivacyBudget::zero(0.5))
                .unwrap();
        for p in d.values() {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
        let r = verify_ldp_bound(&table, &PrivacyBudget::zero(0.5), &[0.0, 0.5, 1.0]).unwrap();
        assert!(r.passed);
        for rec in &r.records {
            assert_eq!(rec.max_log_ratio, Some(0.0));
        }
    }

    #[test]
    fn full_weight_gives_uniform_values() {
        let table = small_table();
        let mut t = table
            .categories()
            .iter()
            .map(|c| c.spec().clone())
            .collect::<Vec<_>>();
        t[1].weight = 1.0;
        let table = CategoryTable::from_specs(t).unwrap();
        let d =
            mechanism_distribution(&"LOCATION".into(), "Tokyo", &table, &budget(1.0, 0.5)).unwrap();
        for cat in table.categories() {
            let probs: Vec<f64> = d
                .iter()
                .filter(|(o, _)| &o.category == cat.id())
                .map(|(_, &p)| p)
                .collect();
            for p in &probs {
                assert!((p - probs[0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn enumeration_matches_monte_carlo() {
        let table = small_table();
        let mut specs = table
            .categories()
            .iter()
            .map(|c| c.spec().clone())
            .collect::<Vec<_>>();
        for s in &mut specs {
            s.weight = 0.5;
        }
        let table = CategoryTable::from_specs(specs).unwrap();
        let b = budget(1.0, 1.0);
        let exact = mechanism_distribution(&"LOCATION".into(), "Oslo", &table, &b).unwrap();
        assert_eq!(exact.len(), 12);

        let entity = Entity {
            surface: "Oslo".into(),
            category: "LOCATION".into(),
            span: 0..4,
            weight: 0.5,
        };
        let n = 1_000_000usize;
        let mut counts: BTreeMap<Outcome, usize> = BTreeMap::new();
        let mut rng = entity_stream(2024, 0);
        for _ in 0..n {
            let r = perturb_entity(&entity, &table, &b, &mut rng).unwrap();
            *counts
                .entry(Outcome {
                    category: r.perturbed_category,
                    value: r.perturbed_value,
                })
                .or_default() += 1;
        }
        for (o, &p) in &exact {
            let freq = *counts.get(o).unwrap_or(&0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * sigma, "{o:?}: {freq} vs {p}");
        }
    }

    #[test]
    fn bound_holds_on_default_table() {
        let table = CategoryTable::default_table();
        let r = verify_ldp_bound(&table, &budget(1.0, 0.5), &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert!(r.passed, "{}", r.to_text());
        for rec in &r.records {
            assert!(rec.max_log_ratio.unwrap() <= 1.0 + 1e-9);
        }
        assert_eq!(r.to_jsonl().lines().count(), 5);
    }

    #[test]
    fn single_layer_ratios_are_bounded() {
        for k in 2..8 {
            for eps in [0.0, 0.3, 1.0, 3.0] {
                let p = rr_probability(eps, k).unwrap();
                let q = (1.0 - p) / (k - 1) as f64;
                assert!(p / q <= eps.exp() * (1.0 + 1e-12));
                assert!(q / p <= eps.exp() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn inflated_value_layer_fails_with_witness() {
        let table = small_table();
        let r =
            verify_ldp_bound_with(&InflatedValueLayer, &table, &budget(1.0, 0.5), &[0.5]).unwrap();
        assert!(!r.passed);
        let rec = &r.records[0];
        assert!(rec.max_log_ratio.unwrap() > 1.0);
        let w = rec.witness.as_ref().unwrap();
        assert_ne!(w.input_a, w.input_b);
        assert!(r.to_text().contains("FAILED"));
    }

    #[test]
    fn table_weights_can_exceed_total_budget() {
        // Inputs of different categories get different splits, and
        // (e^ε₁ + K₁ - 1)(e^ε₂ + K₂ - 1) is not constant in the split, so the
        // composed ratio exceeds ε_total. It stays below 2·ε_total.
        let table = CategoryTable::default_table();
        let rec = verify_ldp_bound_table_weights(&table, &budget(4.0, 0.5)).unwrap();
        assert_eq!(rec.weight, None);
        let ratio = rec.max_log_ratio.unwrap();
        assert!(!rec.passed);
        assert!(ratio > 4.0 && ratio < 8.0, "{ratio}");
        let w = rec.witness.unwrap();
        assert_ne!(w.input_a.category, w.input_b.category);
    }

    #[test]
    fn guard_rejects_huge_domains() {
        let mut specs: Vec<_> = small_table()
            .categories()
            .iter()
            .map(|c| c.spec().clone())
            .collect();
        specs[0].value_domain = (0..4000).map(|i| format!("surrogate {i}")).collect();
        let table = CategoryTable::from_specs(specs).unwrap();
        let err = verify_ldp_bound(&table, &budget(1.0, 0.5), &[0.5]).unwrap_err();
        assert_eq!(err, LdpError::DomainGuard(12_000));
    }

    #[test]
    fn monotonicity_holds() {
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let r = verify_monotonicity(1.0, &grid, &[0.1, 0.5, 1.0]).unwrap();
        assert!(r.passed, "{}", r.to_text());
        assert_eq!(r.records[2].linear_when_alpha_one, Some(true));
        assert!(r.records.iter().all(|x| x.min_epsilon1_step > 0.0));
    }
}
