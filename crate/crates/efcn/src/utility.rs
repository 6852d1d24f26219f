//! Utility tables for set-valued decisions.
//!
//! The decision layer assigns each pixel the act (class set) with the
//! highest pignistic expected utility. The utilities of imprecise acts are
//! derived from a base M×M single-class utility matrix by ordered weighted
//! averaging (OWA): the utility of assigning a pixel of true class ωj to a
//! set A aggregates {u_{i,j} : ωi ∈ A} with weights that interpolate between
//! the maximum (γ = 1, full tolerance to imprecision) and the mean (γ = 0.5,
//! imprecision counts as error sharing). Among all weight vectors with a
//! given attitude γ the maximum-entropy one is used; it is known to be
//! geometric, which the solver exploits via a one-dimensional root find.

use crate::belief::PignisticDist;
use crate::frame::{ActList, ClassSet, Frame};
use crate::{Error, Result};

/// Residual bound enforced on the attitude constraint after solving.
const OWA_RESIDUAL_TOL: f64 = 1e-9;

/// Attitude of an OWA weight vector (also called orness): 1 for pure max,
/// 0.5 for the arithmetic mean, 0 for pure min. By convention 1.0 for k = 1.
pub fn orness(weights: &[f64]) -> f64 {
    let k = weights.len();
    if k <= 1 {
        return 1.0;
    }
    weights
        .iter()
        .enumerate()
        .map(|(i, &g)| (k - 1 - i) as f64 / (k - 1) as f64 * g)
        .sum()
}

/// Shannon entropy of a weight vector, the dispersion the solver maximizes.
pub fn entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| -g * g.ln())
        .sum()
}

/// Solves for the maximum-entropy OWA weight vector of length `k` with
/// attitude `gamma` ∈ [0.5, 1].
///
/// The optimum is geometric: g_i ∝ q^(i−1) for some ratio q ∈ (0, 1], found
/// by bisection on the strictly decreasing map q ↦ orness(weights(q)).
/// Endpoints short-circuit: γ = 0.5 gives uniform weights, γ = 1 puts all
/// weight on the maximum.
pub fn solve_owa(gamma: f64, k: usize) -> Result<Vec<f64>> {
    if !(0.5..=1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "imprecision tolerance must lie in [0.5, 1], got {gamma}"
        )));
    }
    if k == 0 {
        return Err(Error::Contract("OWA weight vector length must be positive".into()));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    if gamma == 1.0 {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        return Ok(w);
    }
    if gamma == 0.5 {
        return Ok(vec![1.0 / k as f64; k]);
    }

    let weights_for = |q: f64| -> Vec<f64> {
        let mut powers = Vec::with_capacity(k);
        let mut p = 1.0;
        for _ in 0..k {
            powers.push(p);
            p *= q;
        }
        let sum: f64 = powers.iter().sum();
        powers.iter_mut().for_each(|v| *v /= sum);
        powers
    };

    // orness(weights_for(q)) runs from 1 at q→0 down to 0.5 at q = 1.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if orness(&weights_for(mid)) > gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let weights = weights_for(0.5 * (lo + hi));
    let residual = (orness(&weights) - gamma).abs();
    if residual > OWA_RESIDUAL_TOL {
        return Err(Error::Numeric {
            what: "OWA weight solve",
            residual,
        });
    }
    Ok(weights)
}

/// Pre-solved OWA weight vectors for every cardinality up to a maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct OwaWeights {
    gamma: f64,
    per_cardinality: Vec<Vec<f64>>, // index k−1 holds the length-k vector
}

impl OwaWeights {
    pub fn solve(gamma: f64, max_cardinality: usize) -> Result<OwaWeights> {
        if max_cardinality == 0 {
            return Err(Error::Contract("maximum cardinality must be positive".into()));
        }
        let per_cardinality = (1..=max_cardinality)
            .map(|k| solve_owa(gamma, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(OwaWeights {
            gamma,
            per_cardinality,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn max_cardinality(&self) -> usize {
        self.per_cardinality.len()
    }

    /// The weight vector for aggregating `k` values (1 ≤ k ≤ max).
    pub fn weights(&self, k: usize) -> &[f64] {
        &self.per_cardinality[k - 1]
    }
}

/// Extends a base M×M utility matrix to the given acts.
///
/// Row A, column j holds the OWA aggregation of {base[i][j] : ωi ∈ A} in
/// descending order. Singleton rows reproduce the base matrix.
pub fn extend_utilities(
    base: &[f64],
    m: usize,
    acts: &ActList,
    owa: &OwaWeights,
) -> Result<Vec<f64>> {
    if base.len() != m * m {
        return Err(Error::Dimension {
            context: "base utility matrix",
            expected: m * m,
            got: base.len(),
        });
    }
    if owa.max_cardinality() < acts.max_cardinality() {
        return Err(Error::Contract(format!(
            "OWA weights solved up to cardinality {}, acts need {}",
            owa.max_cardinality(),
            acts.max_cardinality()
        )));
    }
    let mut extended = vec![0.0; acts.len() * m];
    let mut column: Vec<f64> = Vec::with_capacity(m);
    for (a, &act) in acts.acts().iter().enumerate() {
        let weights = owa.weights(act.cardinality());
        for j in 0..m {
            column.clear();
            column.extend(act.iter().map(|i| base[i * m + j]));
            column.sort_by(|x, y| y.partial_cmp(x).expect("finite utilities"));
            extended[a * m + j] = column
                .iter()
                .zip(weights)
                .map(|(v, w)| v * w)
                .sum();
        }
    }
    Ok(extended)
}

/// Soft-label utilities derived from an extended matrix.
///
/// For act A and label L the raw value is the mean of {ũ_{A,k} : ωk ∈ L};
/// the normalized value divides by the raw diagonal so that ũ_{L,L} = 1.
/// Returns (raw, normalized) as |acts|×|acts| row-major matrices whose
/// columns follow the same act order as the rows.
pub fn soft_label_utilities(
    extended: &[f64],
    m: usize,
    acts: &ActList,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = acts.len();
    if extended.len() != n * m {
        return Err(Error::Dimension {
            context: "extended utility matrix",
            expected: n * m,
            got: extended.len(),
        });
    }
    let mut raw = vec![0.0; n * n];
    for l in 0..n {
        let label = acts.act(l);
        let inv_card = 1.0 / label.cardinality() as f64;
        for a in 0..n {
            raw[a * n + l] = label.iter().map(|k| extended[a * m + k]).sum::<f64>() * inv_card;
        }
    }
    let mut normalized = vec![0.0; n * n];
    for l in 0..n {
        let denom = raw[l * n + l];
        if !(denom > 0.0) {
            return Err(Error::InvalidLabel(format!(
                "label {:?} has non-positive self-utility {denom}; it cannot be normalized",
                acts.act(l)
            )));
        }
        for a in 0..n {
            normalized[a * n + l] = raw[a * n + l] / denom;
        }
    }
    Ok((raw, normalized))
}

/// The full decision table: base, extended and soft-label utilities for a
/// fixed act list and imprecision tolerance γ.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityTable {
    m: usize,
    gamma: f64,
    acts: ActList,
    base: Vec<f64>,     // M×M
    extended: Vec<f64>, // |acts|×M
    raw_soft: Vec<f64>, // |acts|×|acts|, ū values (labeling expected utilities)
    soft: Vec<f64>,     // |acts|×|acts|, normalized so the diagonal is 1
}

impl UtilityTable {
    /// Table over the identity base matrix: utility 1 for the true class,
    /// 0 for any other.
    pub fn identity(frame: &Frame, acts: ActList, gamma: f64) -> Result<UtilityTable> {
        let m = frame.class_count();
        let mut base = vec![0.0; m * m];
        for i in 0..m {
            base[i * m + i] = 1.0;
        }
        UtilityTable::with_base(frame, acts, gamma, base)
    }

    /// Table over an arbitrary base matrix (row = assigned class, column =
    /// true class). Entries must be finite.
    pub fn with_base(
        frame: &Frame,
        acts: ActList,
        gamma: f64,
        base: Vec<f64>,
    ) -> Result<UtilityTable> {
        let m = frame.class_count();
        if acts.class_count() != m {
            return Err(Error::Dimension {
                context: "act list class count",
                expected: m,
                got: acts.class_count(),
            });
        }
        if base.len() != m * m {
            return Err(Error::Dimension {
                context: "base utility matrix",
                expected: m * m,
                got: base.len(),
            });
        }
        if let Some(i) = base.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "base utility matrix".into(),
                index: i,
            });
        }
        let owa = OwaWeights::solve(gamma, acts.max_cardinality())?;
        let extended = extend_utilities(&base, m, &acts, &owa)?;
        let (raw_soft, soft) = soft_label_utilities(&extended, m, &acts)?;
        Ok(UtilityTable {
            m,
            gamma,
            acts,
            base,
            extended,
            raw_soft,
            soft,
        })
    }

    pub fn class_count(&self) -> usize {
        self.m
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn acts(&self) -> &ActList {
        &self.acts
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// ũ_{A,j}: utility of act `a` (by act-list position) when the true
    /// class is ωj.
    pub fn extended(&self, a: usize, j: usize) -> f64 {
        self.extended[a * self.m + j]
    }

    pub fn extended_row(&self, a: usize) -> &[f64] {
        &self.extended[a * self.m..(a + 1) * self.m]
    }

    /// Act-list position of a label, which must itself be one of the acts.
    pub fn label_position(&self, label: ClassSet) -> Result<usize> {
        self.acts.position(label).ok_or_else(|| {
            Error::InvalidLabel(format!(
                "label {label:?} is not among the acts of this utility table"
            ))
        })
    }

    /// Normalized soft-label utility ũ_{A,L} by act-list positions.
    pub fn soft(&self, a: usize, label_pos: usize) -> f64 {
        self.soft[a * self.acts.len() + label_pos]
    }

    /// Normalized soft-label utility of act `a` under `label`.
    pub fn soft_for_label(&self, a: usize, label: ClassSet) -> Result<f64> {
        Ok(self.soft(a, self.label_position(label)?))
    }

    /// Raw (unnormalized) soft-label utility ū_{A,L} by positions.
    pub fn raw_soft(&self, a: usize, label_pos: usize) -> f64 {
        self.raw_soft[a * self.acts.len() + label_pos]
    }

    /// Pignistic expected utility of every act: E(f_A) = Σ_j ũ_{A,j}·p_j.
    pub fn expected_utilities(&self, betp: &PignisticDist) -> Result<ExpectedUtilities> {
        if betp.class_count() != self.m {
            return Err(Error::Dimension {
                context: "pignistic distribution",
                expected: self.m,
                got: betp.class_count(),
            });
        }
        let values = (0..self.acts.len())
            .map(|a| {
                self.extended_row(a)
                    .iter()
                    .zip(betp.probs())
                    .map(|(u, p)| u * p)
                    .sum()
            })
            .collect();
        Ok(ExpectedUtilities { values })
    }

    /// Expected utilities under the logical ("labeling") mass function of a
    /// soft label: all mass on the label, whose pignistic probability is
    /// uniform over its members. Equal to the raw soft column ū_{·,L}.
    pub fn labeling_expected_utilities(&self, label: ClassSet) -> Result<ExpectedUtilities> {
        let l = self.label_position(label)?;
        let n = self.acts.len();
        let values = (0..n).map(|a| self.raw_soft[a * n + l]).collect();
        Ok(ExpectedUtilities { values })
    }
}

/// Expected utilities of all acts for one pixel, in act-list order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedUtilities {
    values: Vec<f64>,
}

impl ExpectedUtilities {
    pub fn from_values(values: Vec<f64>) -> ExpectedUtilities {
        ExpectedUtilities { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, a: usize) -> f64 {
        self.values[a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Picks the act with the highest expected utility.
///
/// Exact ties are broken toward the smaller cardinality, then the smaller
/// bitmask, so a precise act always beats an equally good imprecise one.
/// Returns the act-list position and the set itself.
pub fn select_act(eu: &ExpectedUtilities, acts: &ActList) -> Result<(usize, ClassSet)> {
    if eu.len() != acts.len() {
        return Err(Error::Dimension {
            context: "expected utility vector",
            expected: acts.len(),
            got: eu.len(),
        });
    }
    if acts.is_empty() {
        return Err(Error::Contract("cannot select from an empty act list".into()));
    }
    if let Some(i) = eu.values().iter().position(|v| v.is_nan()) {
        return Err(Error::Contract(format!(
            "expected utility of act {i} is NaN"
        )));
    }
    let mut best = 0usize;
    for a in 1..acts.len() {
        let (va, vb) = (eu.value(a), eu.value(best));
        let better = va > vb
            || (va == vb && {
                let (sa, sb) = (acts.act(a), acts.act(best));
                (sa.cardinality(), sa.bits()) < (sb.cardinality(), sb.bits())
            });
        if better {
            best = a;
        }
    }
    Ok((best, acts.act(best)))
}
