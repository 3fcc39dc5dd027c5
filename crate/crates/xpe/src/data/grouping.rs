//! Source sets and target language groups.
//!
//! Targets aggregate into four groups: everything except the sources, the
//! seen languages except the sources, the unseen languages, and the
//! low-performing languages (reference accuracy strictly below the
//! threshold). Seen and unseen partition the full language set; the
//! low-performing group usually sits inside unseen but is only warned about,
//! not enforced.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LanguageId, SyntheticLanguage};
use crate::error::{Error, Result};

pub const LOW_PERFORMANCE_THRESHOLD: f64 = 0.60;

/// Surrogate "full fine-tuning" reference accuracy for synthetic languages:
/// linear in the lexical alignment, from near-chance to near-ceiling.
const REFERENCE_ACC_FLOOR: f64 = 0.30;
const REFERENCE_ACC_CEILING: f64 = 0.97;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub id: LanguageId,
    pub seen: bool,
    #[serde(default)]
    pub reference_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageGrouping {
    pub languages: Vec<LanguageInfo>,
    pub source_sets: BTreeMap<String, Vec<LanguageId>>,
    pub low_performance_threshold: f64,
}

/// Languages whose reference accuracy falls strictly below the threshold.
pub fn classify_low_performing(
    reference_acc: &BTreeMap<LanguageId, f64>,
    threshold: f64,
) -> BTreeSet<LanguageId> {
    reference_acc
        .iter()
        .filter(|(_, &acc)| acc < threshold)
        .map(|(id, _)| id.clone())
        .collect()
}

#[derive(Debug, Clone)]
pub struct TargetGroups {
    pub all_wo_sources: BTreeSet<LanguageId>,
    pub seen_wo_sources: BTreeSet<LanguageId>,
    pub unseen: BTreeSet<LanguageId>,
    pub low_performing: BTreeSet<LanguageId>,
    pub warnings: Vec<String>,
}

impl TargetGroups {
    /// Fixed render order for reports.
    pub fn named(&self) -> [(&'static str, &BTreeSet<LanguageId>); 4] {
        [
            ("all-wo-sources", &self.all_wo_sources),
            ("seen-wo-sources", &self.seen_wo_sources),
            ("unseen", &self.unseen),
            ("low-performing", &self.low_performing),
        ]
    }
}

impl LanguageGrouping {
    pub fn new(
        languages: Vec<LanguageInfo>,
        source_sets: BTreeMap<String, Vec<LanguageId>>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for info in &languages {
            if !ids.insert(info.id.clone()) {
                return Err(Error::Format(format!("duplicate language id {}", info.id)));
            }
        }
        for (name, members) in &source_sets {
            for id in members {
                if !ids.contains(id) {
                    return Err(Error::Config(format!(
                        "source set {name} names unknown language {id}"
                    )));
                }
            }
        }
        Ok(Self { languages, source_sets, low_performance_threshold: LOW_PERFORMANCE_THRESHOLD })
    }

    /// Grouping for a synthetic family, with reference accuracies surrogated
    /// from the alignment knob. Defines one source set per prefix size of the
    /// seen languages (compact-3 style) plus "seen-all".
    pub fn from_family(family: &[SyntheticLanguage]) -> Result<Self> {
        let languages = family
            .iter()
            .map(|lang| LanguageInfo {
                id: lang.id.clone(),
                seen: lang.seen,
                reference_accuracy: Some(
                    REFERENCE_ACC_FLOOR
                        + (REFERENCE_ACC_CEILING - REFERENCE_ACC_FLOOR) * lang.alignment,
                ),
            })
            .collect::<Vec<_>>();
        let seen_ids: Vec<LanguageId> =
            family.iter().filter(|l| l.seen).map(|l| l.id.clone()).collect();
        let mut source_sets = BTreeMap::new();
        if seen_ids.len() >= 3 {
            source_sets.insert("compact-3".to_string(), seen_ids[..3].to_vec());
        }
        source_sets.insert("seen-all".to_string(), seen_ids);
        Self::new(languages, source_sets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("grouping encode: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grouping: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: bad grouping file: {e}", path.display())))?;
        // revalidate invariants on externally supplied files
        Self::new(grouping.languages, grouping.source_sets).map(|mut g| {
            g.low_performance_threshold = grouping.low_performance_threshold;
            g
        })
    }

    pub fn all(&self) -> BTreeSet<LanguageId> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn seen(&self) -> BTreeSet<LanguageId> {
        self.languages.iter().filter(|l| l.seen).map(|l| l.id.clone()).collect()
    }

    pub fn unseen(&self) -> BTreeSet<LanguageId> {
        self.languages.iter().filter(|l| !l.seen).map(|l| l.id.clone()).collect()
    }

    pub fn reference_accuracies(&self) -> BTreeMap<LanguageId, f64> {
        self.languages
            .iter()
            .filter_map(|l| l.reference_accuracy.map(|acc| (l.id.clone(), acc)))
            .collect()
    }

    pub fn source_set(&self, name: &str) -> Result<&[LanguageId]> {
        self.source_sets
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("unknown source set '{name}'")))
    }

    /// Resolve the four target groups for a named source set.
    pub fn resolve(&self, source_set: &str) -> Result<TargetGroups> {
        let sources: BTreeSet<LanguageId> = self.source_set(source_set)?.iter().cloned().collect();
        self.resolve_with_sources(&sources)
    }

    pub fn resolve_with_sources(&self, sources: &BTreeSet<LanguageId>) -> Result<TargetGroups> {
        let all = self.all();
        for id in sources {
            if !all.contains(id) {
                return Err(Error::Config(format!("source language {id} is not in the grouping")));
            }
        }
        let seen = self.seen();
        let unseen = self.unseen();
        let low_performing =
            classify_low_performing(&self.reference_accuracies(), self.low_performance_threshold);
        let mut warnings = Vec::new();
        let outside: Vec<&LanguageId> =
            low_performing.iter().filter(|id| !unseen.contains(*id)).collect();
        if !outside.is_empty() {
            warnings.push(format!(
                "low-performing languages outside the unseen group: {}",
                outside.iter().map(|id| id.0.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        Ok(TargetGroups {
            all_wo_sources: all.difference(sources).cloned().collect(),
            seen_wo_sources: seen.difference(sources).cloned().collect(),
            unseen,
            low_performing,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grouping() -> LanguageGrouping {
        let languages = vec![
            LanguageInfo { id: "a".into(), seen: true, reference_accuracy: Some(0.9) },
            LanguageInfo { id: "b".into(), seen: true, reference_accuracy: Some(0.8) },
            LanguageInfo { id: "c".into(), seen: false, reference_accuracy: Some(0.55) },
            LanguageInfo { id: "d".into(), seen: false, reference_accuracy: Some(0.70) },
        ];
        let mut source_sets = BTreeMap::new();
        source_sets.insert("one".to_string(), vec![LanguageId::from("a")]);
        LanguageGrouping::new(languages, source_sets).unwrap()
    }

    #[test]
    fn low_performing_uses_strict_inequality() {
        let mut acc = BTreeMap::new();
        acc.insert(LanguageId::from("a"), 0.55);
        acc.insert(LanguageId::from("b"), 0.60);
        acc.insert(LanguageId::from("c"), 0.70);
        let low = classify_low_performing(&acc, 0.60);
        assert_eq!(low, BTreeSet::from([LanguageId::from("a")]));
        assert!(classify_low_performing(&BTreeMap::new(), 0.6).is_empty());
        let all = classify_low_performing(&acc, 1.01);
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn resolve_removes_sources_from_both_wo_groups() {
        let g = grouping();
        let groups = g.resolve("one").unwrap();
        assert_eq!(groups.all_wo_sources.len(), 3);
        assert!(!groups.all_wo_sources.contains(&LanguageId::from("a")));
        assert_eq!(groups.seen_wo_sources, BTreeSet::from([LanguageId::from("b")]));
        assert_eq!(groups.unseen.len(), 2);
        assert_eq!(groups.low_performing, BTreeSet::from([LanguageId::from("c")]));
        assert!(groups.warnings.is_empty());
    }

    #[test]
    fn empty_source_set_keeps_all_languages() {
        let g = grouping();
        let groups = g.resolve_with_sources(&BTreeSet::new()).unwrap();
        assert_eq!(groups.all_wo_sources, g.all());
        // seen + unseen partition all
        let union: BTreeSet<_> = g.seen().union(&g.unseen()).cloned().collect();
        assert_eq!(union, g.all());
        assert!(g.seen().intersection(&g.unseen()).next().is_none());
    }

    #[test]
    fn unknown_source_language_is_rejected() {
        let g = grouping();
        let sources = BTreeSet::from([LanguageId::from("zz")]);
        assert!(matches!(g.resolve_with_sources(&sources), Err(Error::Config(_))));
    }

    #[test]
    fn low_performing_outside_unseen_warns_but_passes() {
        let languages = vec![
            LanguageInfo { id: "a".into(), seen: true, reference_accuracy: Some(0.4) },
            LanguageInfo { id: "b".into(), seen: false, reference_accuracy: Some(0.9) },
        ];
        let g = LanguageGrouping::new(languages, BTreeMap::new()).unwrap();
        let groups = g.resolve_with_sources(&BTreeSet::new()).unwrap();
        assert_eq!(groups.low_performing.len(), 1);
        assert_eq!(groups.warnings.len(), 1);
    }

    #[test]
    fn grouping_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grouping.json");
        let g = grouping();
        g.save(&path).unwrap();
        let loaded = LanguageGrouping::load(&path).unwrap();
        assert_eq!(loaded.languages.len(), 4);
        assert_eq!(loaded.source_sets, g.source_sets);
    }

    #[test]
    fn duplicate_language_ids_are_rejected() {
        let languages = vec![
            LanguageInfo { id: "a".into(), seen: true, reference_accuracy: None },
            LanguageInfo { id: "a".into(), seen: false, reference_accuracy: None },
        ];
        assert!(matches!(
            LanguageGrouping::new(languages, BTreeMap::new()),
            Err(Error::Format(_))
        ));
    }
}
