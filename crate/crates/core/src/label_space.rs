//! Open-set label structure shared by the source and target domains.
//!
//! The unified index puts source labels first (in the order given), then the
//! target-specific labels. Label names are compared exactly, case included.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which domain a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// Source, target, common and domain-specific label sets with a stable
/// name-to-index map over their union.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTopology {
    source_labels: Vec<String>,
    target_labels: Vec<String>,
    common_labels: Vec<String>,
    source_specific: Vec<String>,
    target_specific: Vec<String>,
    unified: Vec<String>,
    index: HashMap<String, usize>,
    in_source: Vec<bool>,
    in_target: Vec<bool>,
}

fn check_list(names: &[String], which: &str) -> Result<()> {
    if names.is_empty() {
        return Err(Error::invalid(format!("{which} label list is empty")));
    }
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid(format!(
                "duplicate label `{name}` in {which} label list"
            )));
        }
    }
    Ok(())
}

impl LabelTopology {
    /// Builds the topology from the two domains' label lists.
    pub fn new<S: AsRef<str>>(source_names: &[S], target_names: &[S]) -> Result<Self> {
        let source: Vec<String> = source_names.iter().map(|s| s.as_ref().to_owned()).collect();
        let target: Vec<String> = target_names.iter().map(|s| s.as_ref().to_owned()).collect();
        check_list(&source, "source")?;
        check_list(&target, "target")?;

        let source_set: HashSet<&str> = source.iter().map(String::as_str).collect();
        let target_set: HashSet<&str> = target.iter().map(String::as_str).collect();

        let common: Vec<String> = source
            .iter()
            .filter(|n| target_set.contains(n.as_str()))
            .cloned()
            .collect();
        let source_specific: Vec<String> = source
            .iter()
            .filter(|n| !target_set.contains(n.as_str()))
            .cloned()
            .collect();
        let target_specific: Vec<String> = target
            .iter()
            .filter(|n| !source_set.contains(n.as_str()))
            .cloned()
            .collect();

        let unified: Vec<String> = source.iter().chain(&target_specific).cloned().collect();
        let index = unified
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let in_source = unified.iter().map(|n| source_set.contains(n.as_str())).collect();
        let in_target = unified.iter().map(|n| target_set.contains(n.as_str())).collect();

        Ok(Self {
            source_labels: source,
            target_labels: target,
            common_labels: common,
            source_specific,
            target_specific,
            unified,
            index,
            in_source,
            in_target,
        })
    }

    pub fn source_labels(&self) -> &[String] {
        &self.source_labels
    }

    pub fn target_labels(&self) -> &[String] {
        &self.target_labels
    }

    pub fn common_labels(&self) -> &[String] {
        &self.common_labels
    }

    pub fn source_specific(&self) -> &[String] {
        &self.source_specific
    }

    pub fn target_specific(&self) -> &[String] {
        &self.target_specific
    }

    /// All labels in unified index order.
    pub fn unified(&self) -> &[String] {
        &self.unified
    }

    pub fn len(&self) -> usize {
        self.unified.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unified.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.unified.get(index).map(String::as_str)
    }

    pub fn is_common(&self, index: usize) -> bool {
        self.in_source[index] && self.in_target[index]
    }

    /// Whether the unified label `index` belongs to `domain`'s label set.
    pub fn in_domain(&self, index: usize, domain: Domain) -> bool {
        match domain {
            Domain::Source => self.in_source[index],
            Domain::Target => self.in_target[index],
        }
    }

    /// Mask over the unified index marking `domain`'s own labels.
    pub fn mask(&self, domain: Domain) -> Vec<bool> {
        (0..self.len()).map(|i| self.in_domain(i, domain)).collect()
    }

    /// Multi-hot encoding of `names` for a sample from `domain`.
    pub fn encode(&self, names: &[&str], domain: Domain) -> Result<LabelVector> {
        let mut values = vec![false; self.len()];
        for &name in names {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::invalid(format!("unknown label `{name}`")))?;
            if !self.in_domain(i, domain) {
                return Err(Error::invalid(format!(
                    "label `{name}` is not in the {domain} label set"
                )));
            }
            values[i] = true;
        }
        Ok(LabelVector {
            values,
            mask: self.mask(domain),
        })
    }

    /// Names of the labels asserted by `v`, in unified order.
    pub fn decode(&self, v: &LabelVector) -> Result<Vec<String>> {
        self.check_len(v)?;
        Ok(v.asserted().map(|i| self.unified[i].clone()).collect())
    }

    /// True iff `v` asserts at least one common label.
    pub fn has_common_label(&self, v: &LabelVector) -> Result<bool> {
        self.check_len(v)?;
        Ok(v.asserted().any(|i| self.is_common(i)))
    }

    fn check_len(&self, v: &LabelVector) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: v.len(),
            });
        }
        Ok(())
    }
}

/// Masked multi-hot label vector over the unified label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    values: Vec<bool>,
    mask: Vec<bool>,
}

impl LabelVector {
    /// Builds a vector from raw parts. Every asserted value must be masked in.
    pub fn from_parts(values: Vec<bool>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::LengthMismatch {
                expected: mask.len(),
                actual: values.len(),
            });
        }
        if values.iter().zip(&mask).any(|(&v, &m)| v && !m) {
            return Err(Error::invalid("label asserted outside its domain mask"));
        }
        Ok(Self { values, mask })
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices with value 1.
    pub fn asserted(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }
}

/// See [`LabelTopology::has_common_label`].
pub fn has_common_label(v: &LabelVector, topology: &LabelTopology) -> Result<bool> {
    topology.has_common_label(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const CHEST_XRAY_14: [&str; 14] = [
        "Atelectasis",
        "Consolidation",
        "Infiltration",
        "Pneumothorax",
        "Edema",
        "Emphysema",
        "Fibrosis",
        "Effusion",
        "Pneumonia",
        "Pleural thickening",
        "Cardiomegaly",
        "Nodule",
        "Mass",
        "Hernia",
    ];

    fn chest() -> LabelTopology {
        LabelTopology::new(&CHEST_XRAY_14, &["COVID-19", "Pneumonia"]).unwrap()
    }

    #[test]
    fn chest_xray_topology() {
        let t = chest();
        assert_eq!(t.common_labels(), ["Pneumonia"]);
        assert_eq!(t.target_specific(), ["COVID-19"]);
        assert_eq!(t.source_specific().len(), 13);
        assert_eq!(t.len(), 15);
        assert_eq!(t.index_of("COVID-19"), Some(14));
        assert_eq!(t.index_of("Atelectasis"), Some(0));
    }

    #[test]
    fn disjoint_and_identical() {
        let t = LabelTopology::new(&["A", "B"], &["C", "D"]).unwrap();
        assert!(t.common_labels().is_empty());
        assert_eq!(t.len(), 4);

        let t = LabelTopology::new(&["A", "B"], &["A", "B"]).unwrap();
        assert_eq!(t.common_labels(), ["A", "B"]);
        assert!(t.source_specific().is_empty());
        assert!(t.target_specific().is_empty());
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        let err = LabelTopology::new(&["A", "B", "A"], &["C"]).unwrap_err();
        assert!(err.to_string().contains("`A`"), "{err}");
        let empty: [&str; 0] = [];
        assert!(LabelTopology::new(&empty, &["C"]).is_err());
        assert!(LabelTopology::new(&["A"], &empty).is_err());
    }

    #[test]
    fn case_sensitive() {
        let t = LabelTopology::new(&["pneumonia"], &["Pneumonia"]).unwrap();
        assert!(t.common_labels().is_empty());
    }

    #[test]
    fn common_label_queries() {
        let t = chest();
        let v = t.encode(&["Pneumonia"], Domain::Target).unwrap();
        assert!(t.has_common_label(&v).unwrap());
        let v = t.encode(&[], Domain::Source).unwrap();
        assert!(!t.has_common_label(&v).unwrap());
        let v = t.encode(&["Cardiomegaly"], Domain::Source).unwrap();
        assert!(!t.has_common_label(&v).unwrap());

        let short = LabelVector::from_parts(vec![false; 3], vec![true; 3]).unwrap();
        assert!(matches!(
            t.has_common_label(&short),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn encode_examples() {
        let t = chest();
        let v = t.encode(&["Pneumonia"], Domain::Source).unwrap();
        assert_eq!(v.values().iter().filter(|&&b| b).count(), 1);
        assert_eq!(v.mask().iter().filter(|&&b| b).count(), 14);

        let v = t.encode(&[], Domain::Target).unwrap();
        assert!(v.values().iter().all(|&b| !b));
        let target_idx: Vec<usize> = v.mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        assert_eq!(target_idx, vec![8, 14]);

        let err = t.encode(&["COVID-19"], Domain::Source).unwrap_err();
        assert!(err.to_string().contains("COVID-19"));
        let err = t.encode(&["Flu"], Domain::Target).unwrap_err();
        assert!(err.to_string().contains("Flu"));
    }

    #[test]
    fn has_common_label_matches_brute_force() {
        // Every topology over up to 16 unified labels, every value pattern.
        for n in 1..=16usize {
            let common_count = n / 3;
            let source: Vec<String> = (0..n - n / 4).map(|i| format!("L{i}")).collect();
            let target: Vec<String> = (0..common_count)
                .map(|i| format!("L{i}"))
                .chain((n - n / 4..n).map(|i| format!("L{i}")))
                .collect();
            let target = if target.is_empty() { vec![format!("T{n}")] } else { target };
            let t = LabelTopology::new(&source, &target).unwrap();
            let len = t.len();
            let patterns: u32 = if len <= 16 { 1 << len } else { 0 };
            for bits in 0..patterns {
                let values: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                let v = LabelVector::from_parts(values.clone(), vec![true; len]).unwrap();
                let expected = values
                    .iter()
                    .enumerate()
                    .any(|(i, &b)| b && t.common_labels().contains(&t.unified()[i]));
                assert_eq!(t.has_common_label(&v).unwrap(), expected);
            }
        }
    }

    fn name_list() -> impl Strategy<Value = Vec<String>> {
        prop::collection::hash_set("[a-e]{1,2}", 1..8).prop_map(|s| {
            let mut v: Vec<String> = s.into_iter().collect();
            v.sort();
            v
        })
    }

    proptest! {
        #[test]
        fn partition_property(source in name_list(), target in name_list()) {
            let t = LabelTopology::new(&source, &target).unwrap();
            let parts: Vec<&String> = t.common_labels().iter()
                .chain(t.source_specific())
                .chain(t.target_specific())
                .collect();
            let set: HashSet<&String> = parts.iter().copied().collect();
            prop_assert_eq!(parts.len(), set.len());
            prop_assert_eq!(set.len(), t.len());
            for name in t.unified() {
                prop_assert!(set.contains(name));
            }
            for (i, name) in t.unified().iter().enumerate() {
                prop_assert_eq!(t.index_of(name), Some(i));
            }
        }

        #[test]
        fn encode_decode_round_trip(source in name_list(), target in name_list(), pick in prop::collection::vec(any::<bool>(), 8)) {
            let t = LabelTopology::new(&source, &target).unwrap();
            let chosen: Vec<&str> = t.target_labels().iter().zip(&pick).filter(|(_, &p)| p).map(|(n, _)| n.as_str()).collect();
            let v = t.encode(&chosen, Domain::Target).unwrap();
            let mut decoded = t.decode(&v).unwrap();
            let mut expected: Vec<String> = chosen.iter().map(|s| s.to_string()).collect();
            decoded.sort();
            expected.sort();
            prop_assert_eq!(decoded, expected);
        }
    }
}
