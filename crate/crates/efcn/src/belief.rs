//! Mass functions and their combination.
//!
//! The output layer only ever produces mass on the M singletons and on Ω,
//! so the workhorse type [`MassVector`] stores exactly those M+1 numbers and
//! [`combine_simple`] exploits the closure of that family under conjunctive
//! combination. [`GeneralMass`] is the slow, fully general representation
//! over arbitrary subsets; [`dempster_oracle`] implements Dempster's rule on
//! it by brute-force enumeration and serves as the reference the fast path
//! is checked against.

use std::collections::BTreeMap;

use crate::frame::ClassSet;
use crate::{Error, Result};

/// Tolerance used when an operation requires a normalized mass function.
const NORMALIZED_TOL: f64 = 1e-9;

/// A mass function restricted to singletons and Ω.
///
/// `singletons[j]` is m({ωj}); `omega` is m(Ω). Components are non-negative
/// but the total need not be 1: combination produces unnormalized masses
/// that are only normalized once at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct MassVector {
    singletons: Vec<f64>,
    omega: f64,
}

impl MassVector {
    /// Builds a mass vector, validating non-negativity and finiteness.
    pub fn new(singletons: Vec<f64>, omega: f64) -> Result<MassVector> {
        for (j, &v) in singletons.iter().chain(std::iter::once(&omega)).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "mass component".into(),
                    index: j,
                });
            }
            if v < 0.0 {
                return Err(Error::Contract(format!(
                    "mass component {j} is negative ({v})"
                )));
            }
        }
        Ok(MassVector { singletons, omega })
    }

    /// The vacuous mass function: all mass on Ω.
    pub fn vacuous(class_count: usize) -> MassVector {
        MassVector {
            singletons: vec![0.0; class_count],
            omega: 1.0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.singletons.len()
    }

    pub fn singleton(&self, j: usize) -> f64 {
        self.singletons[j]
    }

    pub fn singletons(&self) -> &[f64] {
        &self.singletons
    }

    pub fn omega_mass(&self) -> f64 {
        self.omega
    }

    /// Total mass over all focal elements.
    pub fn total(&self) -> f64 {
        self.singletons.iter().sum::<f64>() + self.omega
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.total() - 1.0).abs() <= tol
    }

    /// The same mass function in the general representation.
    pub fn to_general(&self) -> GeneralMass {
        let m = self.class_count();
        let mut g = GeneralMass::new(m);
        for (j, &v) in self.singletons.iter().enumerate() {
            if v != 0.0 {
                g.add(ClassSet::singleton(j), v).expect("singleton fits frame");
            }
        }
        if self.omega != 0.0 {
            g.add(ClassSet::omega(m), self.omega).expect("omega fits frame");
        }
        g
    }
}

/// Conjunctive combination of two singleton+Ω mass vectors.
///
/// All pairwise intersections within this family are again singletons or Ω
/// (or ∅, whose mass is discarded), so the result stays in the family:
///
/// * out({ωj}) = a({ωj})·b({ωj}) + a({ωj})·b(Ω) + a(Ω)·b({ωj})
/// * out(Ω)    = a(Ω)·b(Ω)
///
/// No normalization is applied; conflict simply leaks total mass, so the
/// output total is at most the product of the input totals.
pub fn combine_simple(a: &MassVector, b: &MassVector) -> Result<MassVector> {
    let m = a.class_count();
    if b.class_count() != m {
        return Err(Error::Dimension {
            context: "combine_simple class count",
            expected: m,
            got: b.class_count(),
        });
    }
    let mut singletons = vec![0.0; m];
    for j in 0..m {
        let (aj, bj) = (a.singletons[j], b.singletons[j]);
        singletons[j] = aj * bj + aj * b.omega + a.omega * bj;
    }
    Ok(MassVector {
        singletons,
        omega: a.omega * b.omega,
    })
}

/// Folds [`combine_simple`] over any number of mass vectors, starting from
/// the vacuous mass function (the neutral element).
pub fn combine_all<'a, I>(masses: I, class_count: usize) -> Result<MassVector>
where
    I: IntoIterator<Item = &'a MassVector>,
{
    let mut acc = MassVector::vacuous(class_count);
    for m in masses {
        acc = combine_simple(&acc, m)?;
    }
    Ok(acc)
}

/// Scales a mass vector so its components sum to one.
pub fn normalize(m: &MassVector) -> Result<MassVector> {
    let total = m.total();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateEvidence);
    }
    Ok(MassVector {
        singletons: m.singletons.iter().map(|v| v / total).collect(),
        omega: m.omega / total,
    })
}

/// A probability distribution over the classes of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PignisticDist {
    probs: Vec<f64>,
}

impl PignisticDist {
    pub fn from_probs(probs: Vec<f64>) -> PignisticDist {
        PignisticDist { probs }
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.probs[j]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of an event: P(A) = Σ_{ωj ∈ A} p_j.
    pub fn prob_of_set(&self, set: ClassSet) -> f64 {
        set.iter().filter(|&j| j < self.probs.len()).map(|j| self.probs[j]).sum()
    }

    /// Index of the most probable class (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for j in 1..self.probs.len() {
            if self.probs[j] > self.probs[best] {
                best = j;
            }
        }
        best
    }
}

/// Pignistic transform of a normalized singleton+Ω mass vector:
/// BetP(ωj) = m({ωj}) + m(Ω)/M. The Ω mass spreads uniformly.
pub fn pignistic(m: &MassVector) -> Result<PignisticDist> {
    if !m.is_normalized(NORMALIZED_TOL) {
        return Err(Error::Contract(format!(
            "pignistic transform needs a normalized mass function (total = {})",
            m.total()
        )));
    }
    let count = m.class_count();
    let share = m.omega / count as f64;
    Ok(PignisticDist {
        probs: m.singletons.iter().map(|v| v + share).collect(),
    })
}

/// A mass function over arbitrary non-empty subsets of the frame.
///
/// This is the slow general representation, used as a test oracle and for
/// small hand-built examples; the pipeline itself stays in [`MassVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralMass {
    class_count: usize,
    assignments: BTreeMap<ClassSet, f64>,
}

impl GeneralMass {
    pub fn new(class_count: usize) -> GeneralMass {
        GeneralMass {
            class_count,
            assignments: BTreeMap::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Adds mass to a focal element. Rejects ∅, sets outside the frame,
    /// and negative or non-finite mass.
    pub fn add(&mut self, set: ClassSet, mass: f64) -> Result<()> {
        if set.is_empty() {
            return Err(Error::InvalidLabel(
                "the empty set cannot carry mass".into(),
            ));
        }
        if !set.fits_frame(self.class_count) {
            return Err(Error::InvalidLabel(format!(
                "set {set:?} has members outside the {}-class frame",
                self.class_count
            )));
        }
        if !mass.is_finite() || mass < 0.0 {
            return Err(Error::Contract(format!("invalid mass value {mass}")));
        }
        *self.assignments.entry(set).or_insert(0.0) += mass;
        Ok(())
    }

    pub fn get(&self, set: ClassSet) -> f64 {
        self.assignments.get(&set).copied().unwrap_or(0.0)
    }

    pub fn focal_elements(&self) -> impl Iterator<Item = (ClassSet, f64)> + '_ {
        self.assignments.iter().map(|(&s, &v)| (s, v))
    }

    pub fn total(&self) -> f64 {
        self.assignments.values().sum()
    }

    /// General pignistic transform: BetP(ωj) = Σ_{A ∋ ωj} m(A)/|A|.
    /// Requires a normalized input.
    pub fn pignistic(&self) -> Result<PignisticDist> {
        if (self.total() - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::Contract(format!(
                "pignistic transform needs a normalized mass function (total = {})",
                self.total()
            )));
        }
        let mut probs = vec![0.0; self.class_count];
        for (&set, &mass) in &self.assignments {
            let share = mass / set.cardinality() as f64;
            for j in set.iter() {
                probs[j] += share;
            }
        }
        Ok(PignisticDist { probs })
    }
}

/// Dempster's rule of combination by brute-force enumeration of focal
/// element pairs, including the conflict normalization 1/(1−κ).
///
/// Guarded to frames of at most 16 classes; this is an oracle for tests and
/// hand-checked examples, not a production path.
pub fn dempster_oracle(a: &GeneralMass, b: &GeneralMass) -> Result<GeneralMass> {
    if a.class_count != b.class_count {
        return Err(Error::Dimension {
            context: "dempster_oracle class count",
            expected: a.class_count,
            got: b.class_count,
        });
    }
    if a.class_count > 16 {
        return Err(Error::Contract(format!(
            "dempster_oracle is limited to 16 classes, got {}",
            a.class_count
        )));
    }
    let mut joint: BTreeMap<ClassSet, f64> = BTreeMap::new();
    let mut surviving = 0.0;
    for (&sa, &ma) in &a.assignments {
        for (&sb, &mb) in &b.assignments {
            let inter = sa.intersection(sb);
            let mass = ma * mb;
            if inter.is_empty() {
                continue; // conflict mass κ, renormalized away below
            }
            *joint.entry(inter).or_insert(0.0) += mass;
            surviving += mass;
        }
    }
    if surviving <= 0.0 {
        return Err(Error::TotalConflict);
    }
    let assignments = joint.into_iter().map(|(s, v)| (s, v / surviving)).collect();
    Ok(GeneralMass {
        class_count: a.class_count,
        assignments,
    })
}
