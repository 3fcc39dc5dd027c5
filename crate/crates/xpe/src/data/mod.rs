//! Synthetic multilingual topic-classification benchmark, a loader for
//! tab-separated datasets, and the language-grouping machinery.

mod grouping;
mod synth;
mod tsv;

pub use grouping::{
    classify_low_performing, LanguageGrouping, LanguageInfo, TargetGroups,
    LOW_PERFORMANCE_THRESHOLD,
};
pub use synth::{
    frequency_classifier_accuracy, generate_dataset, generate_language_family, AlignmentProfile,
    SyntheticFamilyConfig, SyntheticLanguage, TopicTask,
};
pub use tsv::{load_tsv_dataset, TsvDataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub String);

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<&str> for LanguageId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub split: Split,
}

/// All examples of one language for one task.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub language: LanguageId,
    pub seen: bool,
    pub n_classes: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(
        language: LanguageId,
        seen: bool,
        n_classes: usize,
        examples: Vec<Example>,
        vocab_bound: usize,
    ) -> Result<Self> {
        for ex in &examples {
            if ex.label >= n_classes {
                return Err(Error::Index { what: "label", index: ex.label, bound: n_classes });
            }
            if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= vocab_bound) {
                return Err(Error::Index { what: "token id", index: bad, bound: vocab_bound });
            }
        }
        Ok(Self { language, seen, n_classes, examples })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Example> {
        self.split(Split::Train)
    }

    pub fn dev(&self) -> Vec<&Example> {
        self.split(Split::Dev)
    }

    pub fn test(&self) -> Vec<&Example> {
        self.split(Split::Test)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Access-policy wrapper: zero-shot target datasets expose only their test
/// split; train/dev access is a contract violation, and every access is
/// counted so campaign logs can audit it.
pub struct GuardedDataset<'a> {
    dataset: &'a Dataset,
    train_allowed: bool,
    accesses: std::cell::Cell<u64>,
}

impl<'a> GuardedDataset<'a> {
    pub fn zero_shot_target(dataset: &'a Dataset) -> Self {
        Self { dataset, train_allowed: false, accesses: std::cell::Cell::new(0) }
    }

    pub fn supervised(dataset: &'a Dataset) -> Self {
        Self { dataset, train_allowed: true, accesses: std::cell::Cell::new(0) }
    }

    pub fn language(&self) -> &LanguageId {
        &self.dataset.language
    }

    pub fn test(&self) -> Vec<&Example> {
        self.accesses.set(self.accesses.get() + 1);
        self.dataset.test()
    }

    pub fn train(&self) -> Result<Vec<&Example>> {
        if !self.train_allowed {
            return Err(Error::Contract(format!(
                "zero-shot evaluation must not read the train split of target {}",
                self.dataset.language
            )));
        }
        self.accesses.set(self.accesses.get() + 1);
        Ok(self.dataset.train())
    }

    pub fn dev(&self) -> Result<Vec<&Example>> {
        if !self.train_allowed {
            return Err(Error::Contract(format!(
                "zero-shot evaluation must not read the dev split of target {}",
                self.dataset.language
            )));
        }
        self.accesses.set(self.accesses.get() + 1);
        Ok(self.dataset.dev())
    }

    pub fn accesses(&self) -> u64 {
        self.accesses.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validates_labels_and_tokens() {
        let bad_label = Dataset::new(
            "x".into(),
            true,
            3,
            vec![Example { tokens: vec![2], label: 3, split: Split::Train }],
            10,
        );
        assert!(matches!(bad_label, Err(Error::Index { .. })));
        let bad_token = Dataset::new(
            "x".into(),
            true,
            3,
            vec![Example { tokens: vec![10], label: 0, split: Split::Train }],
            10,
        );
        assert!(matches!(bad_token, Err(Error::Index { .. })));
    }

    #[test]
    fn guarded_dataset_blocks_zero_shot_train_access() {
        let ds = Dataset::new(
            "t".into(),
            false,
            2,
            vec![
                Example { tokens: vec![2], label: 0, split: Split::Train },
                Example { tokens: vec![3], label: 1, split: Split::Test },
            ],
            10,
        )
        .unwrap();
        let guard = GuardedDataset::zero_shot_target(&ds);
        assert!(matches!(guard.train(), Err(Error::Contract(_))));
        assert!(matches!(guard.dev(), Err(Error::Contract(_))));
        assert_eq!(guard.test().len(), 1);
        assert_eq!(guard.accesses(), 1);

        let open = GuardedDataset::supervised(&ds);
        assert_eq!(open.train().unwrap().len(), 1);
    }
}
