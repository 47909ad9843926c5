//! The fixed 14-entry finding lexicon shared by the parser, rewards,
//! sampler and metrics.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const NUM_LABELS: usize = 14;

const NAMES: [&str; NUM_LABELS] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

/// One entry of the lexicon, identified by its position in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(u8);

impl Label {
    pub const NO_FINDING: Label = Label(8);
    pub const SUPPORT_DEVICES: Label = Label(13);

    pub fn from_id(id: usize) -> Option<Label> {
        (id < NUM_LABELS).then_some(Label(id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize]
    }

    /// Every label except "No Finding".
    pub fn is_pathology(self) -> bool {
        self != Label::NO_FINDING
    }

    pub fn all() -> impl Iterator<Item = Label> + Clone {
        (0..NUM_LABELS as u8).map(Label)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_label(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown label {s:?}")))
    }
}

pub fn canonical_labels() -> Vec<Label> {
    Label::all().collect()
}

/// The nine categories shared with the NIH label set.
pub fn nih_compatible_subset() -> Vec<Label> {
    [0, 1, 2, 3, 6, 8, 10, 11, 12].into_iter().map(Label).collect()
}

pub(crate) fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Case-insensitive exact match after trimming and collapsing internal
/// whitespace. There is no fuzzy matching.
pub fn parse_label(text: &str) -> Option<Label> {
    let norm = normalize(text);
    Label::all().find(|l| normalize(l.name()) == norm)
}

/// Set of labels stored as a 14-bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(u16);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn from_bits(bits: u16) -> LabelSet {
        LabelSet(bits & ((1 << NUM_LABELS) - 1))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn single(label: Label) -> LabelSet {
        LabelSet(1 << label.0)
    }

    /// Parses each name with [`parse_label`]; the first unknown name is an error.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<LabelSet> {
        names.iter().try_fold(LabelSet::EMPTY, |mut set, n| {
            let label =
                parse_label(n.as_ref()).ok_or_else(|| Error::UnknownLabel(n.as_ref().to_owned()))?;
            set.insert(label);
            Ok(set)
        })
    }

    /// Returns true if the label was not already present.
    pub fn insert(&mut self, label: Label) -> bool {
        let fresh = !self.contains(label);
        self.0 |= 1 << label.0;
        fresh
    }

    pub fn contains(self, label: Label) -> bool {
        self.0 & (1 << label.0) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    pub fn difference(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: LabelSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Label> {
        Label::all().filter(move |l| self.contains(*l))
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(Label::name).collect()
    }
}

impl FromIterator<Label> for LabelSet {
    fn from_iter<I: IntoIterator<Item = Label>>(iter: I) -> Self {
        let mut set = LabelSet::EMPTY;
        for l in iter {
            set.insert(l);
        }
        set
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(Label::name)).finish()
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let labels = Vec::<Label>::deserialize(d)?;
        Ok(labels.into_iter().collect())
    }
}

/// Per-label prevalence measured over a data pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub prevalence: [f64; NUM_LABELS],
}

impl LabelStats {
    /// All prevalences zero; false positives then cost the base penalty.
    pub fn uniform_zero() -> LabelStats {
        LabelStats { prevalence: [0.0; NUM_LABELS] }
    }

    pub fn get(&self, label: Label) -> f64 {
        self.prevalence[label.id()]
    }
}

pub fn label_stats(pool: &[LabelSet]) -> Result<LabelStats> {
    if pool.is_empty() {
        return Err(Error::Empty("label pool"));
    }
    let mut counts = [0usize; NUM_LABELS];
    for set in pool {
        for l in set.iter() {
            counts[l.id()] += 1;
        }
    }
    let n = pool.len() as f64;
    Ok(LabelStats { prevalence: counts.map(|c| c as f64 / n) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_order() {
        let labels = canonical_labels();
        assert_eq!(labels.len(), 14);
        assert_eq!(labels[0].name(), "Atelectasis");
        assert_eq!(labels[8].name(), "No Finding");
        assert_eq!(labels[13].name(), "Support Devices");
    }

    #[test]
    fn parse_label_normalizes() {
        assert_eq!(parse_label("  pleural effusion "), Some(Label(9)));
        assert_eq!(parse_label("No Finding"), Some(Label::NO_FINDING));
        assert_eq!(parse_label("enlarged \t  CARDIOMEDIASTINUM"), Some(Label(4)));
        assert_eq!(parse_label("Pneumonitis"), None);
        assert_eq!(parse_label(""), None);
        assert_eq!(parse_label("Edem"), None);
    }

    #[test]
    fn canonical_names_round_trip_and_are_unique() {
        for l in Label::all() {
            assert_eq!(parse_label(l.name()), Some(l));
            assert_eq!(parse_label(&l.name().to_uppercase()), Some(l));
        }
        let mut norms: Vec<_> = Label::all().map(|l| normalize(l.name())).collect();
        norms.sort();
        norms.dedup();
        assert_eq!(norms.len(), NUM_LABELS);
    }

    #[test]
    fn nih_subset() {
        let nih = nih_compatible_subset();
        assert_eq!(nih.len(), 9);
        assert!(nih.iter().any(|l| l.name() == "Pneumothorax"));
        assert!(!nih.iter().any(|l| l.name() == "Support Devices"));
        let all = canonical_labels();
        assert!(nih.iter().all(|l| all.contains(l)));
    }

    #[test]
    fn stats() {
        let edema = LabelSet::from_names(&["Edema"]).unwrap();
        let nf = LabelSet::single(Label::NO_FINDING);
        let s = label_stats(&[edema, edema]).unwrap();
        assert_eq!(s.get(Label(3)), 1.0);
        assert!(Label::all().filter(|l| l.id() != 3).all(|l| s.get(l) == 0.0));
        let s = label_stats(&[edema, nf]).unwrap();
        assert_eq!(s.get(Label(3)), 0.5);
        assert!(label_stats(&[]).is_err());
    }

    #[test]
    fn set_serde() {
        let set = LabelSet::from_names(&["Edema", "cardiomegaly"]).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"["Cardiomegaly","Edema"]"#);
        assert_eq!(serde_json::from_str::<LabelSet>(&json).unwrap(), set);
        assert!(serde_json::from_str::<LabelSet>(r#"["Pneumonitis"]"#).is_err());
    }
}
