//! Frames of discernment and subsets of them.
//!
//! A [`Frame`] is the ordered list of class names Ω = {ω1, ..., ωM}. Subsets
//! are represented as u64 bitmasks ([`ClassSet`]), which caps M at 64 —
//! far above anything this crate is used for. An [`ActList`] is the ordered
//! collection of sets a decision maker may assign to a pixel: the singletons,
//! any multi-class sets observed as soft labels, and Ω.

use std::collections::HashMap;
use std::fmt;

use crate::{Error, Result};

/// Maximum number of classes a frame can hold (bitmask width).
pub const MAX_CLASSES: usize = 64;

/// A subset of the frame of discernment, stored as a bitmask.
///
/// Bit `j` set means class index `j` is a member. The empty set is
/// representable (and used transiently, e.g. as a conflict bucket in
/// Dempster combination) but is never a valid label or act.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassSet {
    bits: u64,
}

impl ClassSet {
    /// The empty set.
    pub const EMPTY: ClassSet = ClassSet { bits: 0 };

    /// Builds a set from a raw bitmask.
    pub fn from_bits(bits: u64) -> ClassSet {
        ClassSet { bits }
    }

    /// The singleton {ω_index}.
    pub fn singleton(index: usize) -> ClassSet {
        debug_assert!(index < MAX_CLASSES);
        ClassSet { bits: 1u64 << index }
    }

    /// The full frame over `m` classes.
    pub fn omega(m: usize) -> ClassSet {
        debug_assert!((1..=MAX_CLASSES).contains(&m));
        if m == MAX_CLASSES {
            ClassSet { bits: u64::MAX }
        } else {
            ClassSet {
                bits: (1u64 << m) - 1,
            }
        }
    }

    /// Builds a set from class indices.
    pub fn from_indices(indices: &[usize]) -> ClassSet {
        let mut bits = 0u64;
        for &i in indices {
            debug_assert!(i < MAX_CLASSES);
            bits |= 1u64 << i;
        }
        ClassSet { bits }
    }

    /// Raw bitmask value. Also the canonical tie-break key: among sets of
    /// equal cardinality, the one with the smaller bit value is preferred.
    pub fn bits(self) -> u64 {
        self.bits
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn cardinality(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_singleton(self) -> bool {
        self.bits.count_ones() == 1
    }

    pub fn contains(self, index: usize) -> bool {
        index < MAX_CLASSES && self.bits & (1u64 << index) != 0
    }

    pub fn union(self, other: ClassSet) -> ClassSet {
        ClassSet {
            bits: self.bits | other.bits,
        }
    }

    pub fn intersection(self, other: ClassSet) -> ClassSet {
        ClassSet {
            bits: self.bits & other.bits,
        }
    }

    pub fn is_subset_of(self, other: ClassSet) -> bool {
        self.bits & !other.bits == 0
    }

    /// Iterates over member class indices in ascending order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let bits = self.bits;
        (0..MAX_CLASSES).filter(move |&i| bits & (1u64 << i) != 0)
    }

    /// True if every member index is below `m` (i.e. the set fits the frame).
    pub fn fits_frame(self, m: usize) -> bool {
        self.is_subset_of(ClassSet::omega(m.clamp(1, MAX_CLASSES)))
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClassSet{{")?;
        let mut first = true;
        for i in self.iter() {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
            first = false;
        }
        write!(f, "}}")
    }
}

/// Ground-truth annotation for one pixel.
///
/// `Known` carries a (possibly multi-class) subset of the frame — multi-class
/// sets arise on ambiguous boundary pixels. `Novel` marks content that
/// belongs to none of the frame's classes; the id distinguishes different
/// novel classes in rejection reports. Novel pixels are excluded from the
/// utility metrics and handled by the novelty statistics instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelLabel {
    Known(ClassSet),
    Novel(u16),
}

impl PixelLabel {
    /// The label set, if this pixel belongs to the frame.
    pub fn known(&self) -> Option<ClassSet> {
        match *self {
            PixelLabel::Known(set) => Some(set),
            PixelLabel::Novel(_) => None,
        }
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, PixelLabel::Novel(_))
    }
}

/// An ordered frame of discernment: the exhaustive list of known classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    names: Vec<String>,
}

impl Frame {
    /// Creates a frame from class names.
    ///
    /// Requires between 2 and 64 unique, non-empty names. Names may not
    /// contain `+`, `,` or whitespace, which are reserved as separators in
    /// the textual set syntax (`"road+grass"`) and the dataset manifest.
    pub fn new<S: Into<String>>(names: Vec<S>) -> Result<Frame> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 || names.len() > MAX_CLASSES {
            return Err(Error::Frame(format!(
                "need between 2 and {MAX_CLASSES} classes, got {}",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Frame(format!("class {i} has an empty name")));
            }
            if name.chars().any(|c| c.is_whitespace() || c == '+' || c == ',') {
                return Err(Error::Frame(format!(
                    "class name {name:?} contains a reserved character"
                )));
            }
            if name == "omega" {
                return Err(Error::Frame(
                    "class name \"omega\" is reserved for the full frame".into(),
                ));
            }
            if names[..i].contains(name) {
                return Err(Error::Frame(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Frame { names })
    }

    /// Number of classes M.
    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The full frame Ω as a set.
    pub fn omega(&self) -> ClassSet {
        ClassSet::omega(self.class_count())
    }

    pub fn singleton(&self, index: usize) -> Result<ClassSet> {
        if index >= self.class_count() {
            return Err(Error::InvalidLabel(format!(
                "class index {index} out of range for {}-class frame",
                self.class_count()
            )));
        }
        Ok(ClassSet::singleton(index))
    }

    /// Validates that `set` is a non-empty subset of this frame.
    pub fn check_set(&self, set: ClassSet) -> Result<()> {
        if set.is_empty() {
            return Err(Error::InvalidLabel("the empty set is not a valid label".into()));
        }
        if !set.fits_frame(self.class_count()) {
            return Err(Error::InvalidLabel(format!(
                "set {:?} has members outside the {}-class frame",
                set,
                self.class_count()
            )));
        }
        Ok(())
    }

    /// Parses the textual set syntax: `"omega"`, a single class name, or
    /// names joined with `+` (e.g. `"road+grass"`).
    pub fn parse_set(&self, text: &str) -> Result<ClassSet> {
        let text = text.trim();
        if text == "omega" {
            return Ok(self.omega());
        }
        let mut bits = 0u64;
        for part in text.split('+') {
            let part = part.trim();
            let idx = self.class_index(part).ok_or_else(|| {
                Error::InvalidLabel(format!("unknown class name {part:?}"))
            })?;
            bits |= 1u64 << idx;
        }
        if bits == 0 {
            return Err(Error::InvalidLabel("empty set expression".into()));
        }
        Ok(ClassSet::from_bits(bits))
    }

    /// Formats a set using the same syntax `parse_set` accepts.
    pub fn format_set(&self, set: ClassSet) -> String {
        if set == self.omega() {
            return "omega".into();
        }
        set.iter()
            .map(|i| self.names[i].as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// The ordered list of acts (assignable sets) for the decision layer.
///
/// Canonical order: the M singletons by class index, then any additional
/// multi-class sets sorted by ascending cardinality with ties broken by
/// ascending bit value, then Ω last. The order is part of the on-disk and
/// reporting contract: utility tables, expected-utility vectors and CSV
/// columns all follow it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActList {
    acts: Vec<ClassSet>,
    index: HashMap<ClassSet, usize>,
    class_count: usize,
}

impl ActList {
    /// Builds the act list for `frame` from the observed soft labels.
    ///
    /// `soft_labels` may contain singletons or Ω (they deduplicate into
    /// their canonical positions) and may be given in any order.
    pub fn build(frame: &Frame, soft_labels: &[ClassSet]) -> Result<ActList> {
        let m = frame.class_count();
        let mut acts: Vec<ClassSet> = (0..m).map(ClassSet::singleton).collect();
        let mut extra: Vec<ClassSet> = Vec::new();
        for &label in soft_labels {
            frame.check_set(label)?;
            if !label.is_singleton() && label != frame.omega() && !extra.contains(&label) {
                extra.push(label);
            }
        }
        extra.sort_by_key(|s| (s.cardinality(), s.bits()));
        acts.extend(extra);
        acts.push(frame.omega());
        let index = acts.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        Ok(ActList {
            acts,
            index,
            class_count: m,
        })
    }

    /// Builds the act list containing only singletons and Ω.
    pub fn singletons_and_omega(frame: &Frame) -> ActList {
        ActList::build(frame, &[]).expect("singleton act list is always valid")
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn acts(&self) -> &[ClassSet] {
        &self.acts
    }

    pub fn act(&self, i: usize) -> ClassSet {
        self.acts[i]
    }

    /// Position of `set` in the list, if present.
    pub fn position(&self, set: ClassSet) -> Option<usize> {
        self.index.get(&set).copied()
    }

    /// Largest cardinality over the acts (= M, since Ω is always present).
    pub fn max_cardinality(&self) -> usize {
        self.class_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame3() -> Frame {
        Frame::new(vec!["bg", "disc", "rect"]).unwrap()
    }

    #[test]
    fn set_basics() {
        let a = ClassSet::from_indices(&[0, 2]);
        assert_eq!(a.cardinality(), 2);
        assert!(a.contains(0));
        assert!(!a.contains(1));
        assert!(ClassSet::singleton(1).is_singleton());
        assert!(!a.is_singleton());
        assert_eq!(a.union(ClassSet::singleton(1)), ClassSet::omega(3));
        assert_eq!(
            a.intersection(ClassSet::from_indices(&[2])),
            ClassSet::singleton(2)
        );
        assert!(ClassSet::singleton(2).is_subset_of(a));
        assert!(!a.is_subset_of(ClassSet::singleton(2)));
        assert_eq!(a.iter().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(ClassSet::omega(64).cardinality(), 64);
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(vec!["a"]).is_err());
        assert!(Frame::new(vec!["a", "a"]).is_err());
        assert!(Frame::new(vec!["a", ""]).is_err());
        assert!(Frame::new(vec!["a", "b c"]).is_err());
        assert!(Frame::new(vec!["a", "b+c"]).is_err());
        assert!(Frame::new(vec!["a", "omega"]).is_err());
        let names: Vec<String> = (0..65).map(|i| format!("c{i}")).collect();
        assert!(Frame::new(names).is_err());
        assert!(Frame::new(vec!["a", "b"]).is_ok());
    }

    #[test]
    fn parse_and_format_sets() {
        let f = frame3();
        assert_eq!(f.parse_set("disc").unwrap(), ClassSet::singleton(1));
        assert_eq!(
            f.parse_set("bg+rect").unwrap(),
            ClassSet::from_indices(&[0, 2])
        );
        assert_eq!(f.parse_set("omega").unwrap(), f.omega());
        // Omega spelled out by name collapses to the "omega" form.
        assert_eq!(f.parse_set("bg+disc+rect").unwrap(), f.omega());
        assert_eq!(f.format_set(ClassSet::from_indices(&[0, 2])), "bg+rect");
        assert_eq!(f.format_set(f.omega()), "omega");
        assert!(f.parse_set("sky").is_err());
        assert!(f.parse_set("").is_err());
        // Round trip for every non-empty subset.
        for bits in 1u64..8 {
            let s = ClassSet::from_bits(bits);
            assert_eq!(f.parse_set(&f.format_set(s)).unwrap(), s);
        }
    }

    #[test]
    fn check_set_rejects_out_of_frame() {
        let f = frame3();
        assert!(f.check_set(ClassSet::EMPTY).is_err());
        assert!(f.check_set(ClassSet::singleton(3)).is_err());
        assert!(f.check_set(f.omega()).is_ok());
    }

    #[test]
    fn act_list_canonical_order() {
        let f = frame3();
        // Soft labels arrive in scrambled order, with duplicates, a singleton
        // and Ω thrown in; they must deduplicate into canonical positions.
        let soft = vec![
            ClassSet::from_indices(&[1, 2]),
            ClassSet::from_indices(&[0, 1]),
            f.omega(),
            ClassSet::singleton(2),
            ClassSet::from_indices(&[0, 1]),
            ClassSet::from_indices(&[0, 2]),
        ];
        let acts = ActList::build(&f, &soft).unwrap();
        let expect = vec![
            ClassSet::singleton(0),
            ClassSet::singleton(1),
            ClassSet::singleton(2),
            ClassSet::from_indices(&[0, 1]), // bits 3
            ClassSet::from_indices(&[0, 2]), // bits 5
            ClassSet::from_indices(&[1, 2]), // bits 6
            f.omega(),
        ];
        assert_eq!(acts.acts(), expect.as_slice());
        for (i, &a) in expect.iter().enumerate() {
            assert_eq!(acts.position(a), Some(i));
        }
        assert_eq!(acts.position(ClassSet::from_bits(0)), None);
    }

    #[test]
    fn act_list_minimal() {
        let f = frame3();
        let acts = ActList::singletons_and_omega(&f);
        assert_eq!(acts.len(), 4);
        assert_eq!(acts.act(3), f.omega());
        assert_eq!(acts.max_cardinality(), 3);
    }

    proptest! {
        /// Set algebra sanity against a second implementation on index sets.
        #[test]
        fn prop_set_ops_match_naive(xs in prop::collection::btree_set(0usize..16, 0..8),
                                    ys in prop::collection::btree_set(0usize..16, 0..8)) {
            let a = ClassSet::from_indices(&xs.iter().copied().collect::<Vec<_>>());
            let b = ClassSet::from_indices(&ys.iter().copied().collect::<Vec<_>>());
            let union: Vec<usize> = xs.union(&ys).copied().collect();
            let inter: Vec<usize> = xs.intersection(&ys).copied().collect();
            prop_assert_eq!(a.union(b).iter().collect::<Vec<_>>(), union);
            prop_assert_eq!(a.intersection(b).iter().collect::<Vec<_>>(), inter);
            prop_assert_eq!(a.cardinality(), xs.len());
            prop_assert_eq!(a.is_subset_of(b), xs.is_subset(&ys));
        }

        /// The act list is always: singletons in index order, extras sorted by
        /// (cardinality, bits), Ω last, no duplicates.
        #[test]
        fn prop_act_list_invariants(raw in prop::collection::vec(1u64..16, 0..10)) {
            let f = Frame::new(vec!["a", "b", "c", "d"]).unwrap();
            let soft: Vec<ClassSet> = raw.into_iter().map(ClassSet::from_bits).collect();
            let acts = ActList::build(&f, &soft).unwrap();
            let m = f.class_count();
            // Singleton prefix.
            for j in 0..m {
                prop_assert_eq!(acts.act(j), ClassSet::singleton(j));
            }
            // Ω last, exactly once.
            prop_assert_eq!(acts.act(acts.len() - 1), f.omega());
            // Strictly increasing (cardinality, bits) over the extras.
            let extras = &acts.acts()[m..acts.len() - 1];
            for w in extras.windows(2) {
                prop_assert!((w[0].cardinality(), w[0].bits()) < (w[1].cardinality(), w[1].bits()));
            }
            for e in extras {
                prop_assert!(!e.is_singleton());
                prop_assert!(*e != f.omega());
            }
            // No duplicates anywhere.
            let mut seen = std::collections::HashSet::new();
            for &a in acts.acts() {
                prop_assert!(seen.insert(a));
            }
        }
    }
}
