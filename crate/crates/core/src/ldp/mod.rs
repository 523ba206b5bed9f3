//! Adaptive two-layer local differential privacy for detected entities.
//!
//! Each flagged entity gets its budget split between a category layer and a
//! value layer according to its category weight. Both layers are k-ary
//! randomized response. The value layer works on slots of the surrogate pool
//! of the (possibly flipped) category: the original surface is encoded as a
//! slot of its own category's pool (its position if it is a pool member,
//! otherwise a stable hash), and that slot index, reduced modulo the pool
//! size of the drawn category, is the value the layer tries to keep. The
//! emitted value is always a surrogate, never the original surface.

mod verify;

pub use verify::{
    joint_distribution, mechanism_distribution, verify_ldp_bound, verify_ldp_bound_table_weights,
    verify_ldp_bound_with, verify_monotonicity, BoundRecord, BoundReport, Mechanism,
    MonotonicityRecord, MonotonicityReport, Outcome, TwoLayerRr, MAX_ENUMERATION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AnnotatedPrompt, CategoryId, CategoryTable, Entity, PrivacyBudget, RiskProfile,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LdpError {
    #[error("sensitivity weight {0} is outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("randomized response needs a domain of at least 2 values, got {0}")]
    DomainTooSmall(usize),
    #[error("epsilon must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("mask has {mask} entries but the prompt has {entities} entities")]
    MaskLength { mask: usize, entities: usize },
    #[error("enumeration of {0} outcomes exceeds the guard of {MAX_ENUMERATION}")]
    DomainGuard(usize),
}

/// Budget split between the category layer (ε₁) and the value layer (ε₂).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub epsilon1: f64,
    pub epsilon2: f64,
}

/// `ε₁ = ε·w / (w + (1-w)·α)`, `ε₂ = ε - ε₁`, with `ε₁ + ε₂ == ε` holding
/// exactly in floating point.
pub fn allocate_budget(weight: f64, budget: &PrivacyBudget) -> Result<BudgetSplit, LdpError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(LdpError::WeightOutOfRange(weight));
    }
    let total = budget.epsilon_total();
    let alpha = budget.alpha();
    let share = if weight == 0.0 {
        0.0
    } else if alpha == 1.0 {
        weight
    } else {
        weight / (weight + (1.0 - weight) * alpha)
    };
    // Round-trip through the subtraction so the pair sums to `total` with no
    // rounding error: one of the two differences is always exact (Sterbenz).
    let epsilon2 = total - total * share;
    Ok(BudgetSplit {
        epsilon1: total - epsilon2,
        epsilon2,
    })
}

/// Truth-retention probability of k-ary randomized response,
/// `e^ε / (e^ε + K - 1)`, evaluated as `1 / (1 + (K-1)e^{-ε})`.
/// Each other value is emitted with probability `p·e^{-ε}`.
pub fn rr_probability(epsilon: f64, k: usize) -> Result<f64, LdpError> {
    if k < 2 {
        return Err(LdpError::DomainTooSmall(k));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(LdpError::InvalidEpsilon(epsilon));
    }
    Ok(1.0 / (1.0 + (k - 1) as f64 * (-epsilon).exp()))
}

/// One randomized-response draw over `0..k`: keep `truth` with probability
/// `p`, otherwise pick uniformly among the other `k - 1` values.
pub fn rr_draw<R: Rng + ?Sized>(rng: &mut R, truth: usize, k: usize, p: f64) -> usize {
    debug_assert!(truth < k && k >= 2);
    if rng.random::<f64>() < p {
        truth
    } else {
        let j = rng.random_range(0..k - 1);
        if j >= truth {
            j + 1
        } else {
            j
        }
    }
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Slot of `surface` in the pool of `category`: its position when it is a
/// pool member, otherwise a stable hash reduced modulo the pool size.
pub fn value_slot(
    table: &CategoryTable,
    category: &CategoryId,
    surface: &str,
) -> Result<usize, LdpError> {
    let pool = table
        .get(category)
        .ok_or_else(|| LdpError::UnknownCategory(category.clone()))?
        .value_domain();
    Ok(pool
        .iter()
        .position(|v| v == surface)
        .unwrap_or_else(|| (stable_hash(surface.as_bytes()) % pool.len() as u64) as usize))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub original: Entity,
    pub split: BudgetSplit,
    pub p1: f64,
    pub p2: f64,
    pub perturbed_category: CategoryId,
    pub perturbed_value: String,
    pub category_flipped: bool,
    pub value_flipped: bool,
}

/// SplitMix64 of `master` offset by `n`: independent per-request seeds
/// from one master seed.
pub fn derive_seed(master: u64, n: u64) -> u64 {
    let mut z = master.wrapping_add(n.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-entity stream: ChaCha8 keyed by `seed`, stream id = entity index.
pub fn entity_stream(seed: u64, entity_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(entity_index as u64);
    rng
}

pub fn perturb_entity<R: Rng + ?Sized>(
    entity: &Entity,
    table: &CategoryTable,
    budget: &PrivacyBudget,
    rng: &mut R,
) -> Result<PerturbationRecord, LdpError> {
    let source = table
        .index_of(&entity.category)
        .ok_or_else(|| LdpError::UnknownCategory(entity.category.clone()))?;
    let weight = table.categories()[source].weight();
    let split = allocate_budget(weight, budget)?;

    let k1 = table.len();
    let p1 = rr_probability(split.epsilon1, k1)?;
    let drawn = rr_draw(rng, source, k1, p1);
    let category = &table.categories()[drawn];

    let pool = category.value_domain();
    let k2 = pool.len();
    let p2 = rr_probability(split.epsilon2, k2)?;
    let truth = value_slot(table, &entity.category, &entity.surface)? % k2;
    let slot = rr_draw(rng, truth, k2, p2);

    Ok(PerturbationRecord {
        original: entity.clone(),
        split,
        p1,
        p2,
        perturbed_category: category.id().clone(),
        perturbed_value: pool[slot].clone(),
        category_flipped: drawn != source,
        value_flipped: slot != truth,
    })
}

/// P*: the prompt with every flagged entity replaced by its perturbed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedPrompt {
    pub text: String,
    pub records: Vec<PerturbationRecord>,
    pub seed: u64,
}

impl PerturbedPrompt {
    pub fn categories_flipped(&self) -> usize {
        self.records.iter().filter(|r| r.category_flipped).count()
    }

    pub fn values_flipped(&self) -> usize {
        self.records.iter().filter(|r| r.value_flipped).count()
    }
}

pub fn perturb_prompt(
    prompt: &AnnotatedPrompt,
    profile: &RiskProfile,
    table: &CategoryTable,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<PerturbedPrompt, LdpError> {
    if profile.mask.len() != prompt.entities.len() {
        return Err(LdpError::MaskLength {
            mask: profile.mask.len(),
            entities: prompt.entities.len(),
        });
    }
    let mut records = Vec::new();
    for (i, (entity, &flagged)) in prompt.entities.iter().zip(&profile.mask).enumerate() {
        if flagged {
            let mut rng = entity_stream(seed, i);
            records.push(perturb_entity(entity, table, budget, &mut rng)?);
        }
    }
    let mut text = prompt.text.clone();
    for record in records.iter().rev() {
        text.replace_range(record.original.span.clone(), &record.perturbed_value);
    }
    Ok(PerturbedPrompt {
        text,
        records,
        seed,
    })
}
