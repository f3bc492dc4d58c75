//! Class universe and the two-task incremental schedule.
//!
//! A run sees three disjoint name sets: base classes (labelled in task 1),
//! novel classes (labelled in task 2) and broad classes, parent-category
//! names that occupy the novel slots of the head during task 1.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// PASCAL VOC 2007 categories in alphabetical order.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Default broad names for the 15+5 split.
pub const DEFAULT_BROAD_15_5: [&str; 5] = ["plant", "animal", "furniture", "vehicle", "machine"];

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("unknown setting '{0}' (expected 10+10, 15+5, 19+1 or synthetic)")]
    UnknownSetting(String),
    #[error("wrong broad count: expected {expected} broad names, got {got}")]
    WrongBroadCount { expected: usize, got: usize },
    #[error("duplicate class name '{0}'")]
    DuplicateName(String),
    #[error("broad name '{0}' collides with a base or novel class")]
    BroadCollision(String),
    #[error("empty class name")]
    EmptyName,
    #[error("class '{0}' not in label space")]
    NotFound(String),
    #[error("invalid registry: {0}")]
    Invalid(String),
}

/// Which split of the class universe a run uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    Voc { base_count: usize },
    Synthetic { base: Vec<String>, novel: Vec<String> },
}

impl Setting {
    /// Parses `10+10`, `15+5` or `19+1`.
    pub fn voc(id: &str) -> Result<Self, RegistryError> {
        match id.trim() {
            "10+10" => Ok(Setting::Voc { base_count: 10 }),
            "15+5" => Ok(Setting::Voc { base_count: 15 }),
            "19+1" => Ok(Setting::Voc { base_count: 19 }),
            other => Err(RegistryError::UnknownSetting(other.to_string())),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Setting::Voc { base_count } => format!("{}+{}", base_count, 20 - base_count),
            Setting::Synthetic { .. } => "synthetic".to_string(),
        }
    }

    fn split(&self) -> Result<(Vec<String>, Vec<String>), RegistryError> {
        match self {
            Setting::Voc { base_count } => {
                if !matches!(base_count, 10 | 15 | 19) {
                    return Err(RegistryError::UnknownSetting(self.id()));
                }
                let names: Vec<String> = VOC_CLASSES.iter().map(|s| s.to_string()).collect();
                let (b, n) = names.split_at(*base_count);
                Ok((b.to_vec(), n.to_vec()))
            }
            Setting::Synthetic { base, novel } => Ok((base.clone(), novel.clone())),
        }
    }
}

/// Trim + lowercase, the single normalization applied at the boundary.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub base_names: Vec<String>,
    pub novel_names: Vec<String>,
    pub broad_names: Vec<String>,
    pub setting_id: String,
}

impl ClassRegistry {
    /// `base ++ novel`, the evaluated class set.
    pub fn all_classes(&self) -> Vec<String> {
        self.base_names.iter().chain(&self.novel_names).cloned().collect()
    }

    pub fn is_base(&self, name: &str) -> bool {
        self.base_names.iter().any(|n| n == name)
    }

    pub fn is_novel(&self, name: &str) -> bool {
        self.novel_names.iter().any(|n| n == name)
    }

    pub fn is_broad(&self, name: &str) -> bool {
        self.broad_names.iter().any(|n| n == name)
    }
}

/// A broken registry invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Overlap { sets: (&'static str, &'static str), name: String },
    CountMismatch { broad: usize, novel: usize },
    EmptyName { set: &'static str },
    Duplicate { set: &'static str, name: String },
    NotNormalized { set: &'static str, name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap { sets, name } => {
                write!(f, "overlap: '{}' is in both {} and {}", name, sets.0, sets.1)
            }
            Violation::CountMismatch { broad, novel } => {
                write!(f, "count mismatch: {broad} broad names for {novel} novel classes")
            }
            Violation::EmptyName { set } => write!(f, "empty name in {set}"),
            Violation::Duplicate { set, name } => write!(f, "duplicate '{name}' in {set}"),
            Violation::NotNormalized { set, name } => {
                write!(f, "'{name}' in {set} is not trimmed lowercase")
            }
        }
    }
}

/// Reports every violated invariant; an empty list means the registry is valid.
pub fn validate_registry(registry: &ClassRegistry) -> Vec<Violation> {
    let sets: [(&'static str, &Vec<String>); 3] = [
        ("base", &registry.base_names),
        ("novel", &registry.novel_names),
        ("broad", &registry.broad_names),
    ];
    let mut out = Vec::new();
    for (label, names) in sets {
        let mut seen = BTreeSet::new();
        for n in names.iter() {
            if n.trim().is_empty() {
                out.push(Violation::EmptyName { set: label });
                continue;
            }
            if *n != normalize_name(n) {
                out.push(Violation::NotNormalized { set: label, name: n.clone() });
            }
            if !seen.insert(n.as_str()) {
                out.push(Violation::Duplicate { set: label, name: n.clone() });
            }
        }
    }
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            for n in sets[i].1 {
                if sets[j].1.contains(n) {
                    out.push(Violation::Overlap { sets: (sets[i].0, sets[j].0), name: n.clone() });
                }
            }
        }
    }
    if registry.broad_names.len() != registry.novel_names.len() {
        out.push(Violation::CountMismatch {
            broad: registry.broad_names.len(),
            novel: registry.novel_names.len(),
        });
    }
    out
}

/// One incremental task: the classes labelled in it and the head's label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub visible_classes: Vec<String>,
    pub label_space: Vec<String>,
}

impl TaskSpec {
    pub fn is_visible(&self, name: &str) -> bool {
        self.visible_classes.iter().any(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSchedule {
    pub registry: ClassRegistry,
    pub tasks: Vec<TaskSpec>,
}

impl IncrementalSchedule {
    pub fn task1(&self) -> &TaskSpec {
        &self.tasks[0]
    }

    pub fn task2(&self) -> &TaskSpec {
        &self.tasks[1]
    }
}

/// Builds the two-task schedule: T1 sees base classes with label space
/// `base ++ broad`, T2 sees novel classes with label space `base ++ novel`.
pub fn build_schedule(
    setting: &Setting,
    broad_names: &[String],
) -> Result<IncrementalSchedule, RegistryError> {
    let (base, novel) = setting.split()?;
    let norm = |v: &[String]| -> Result<Vec<String>, RegistryError> {
        v.iter()
            .map(|n| {
                let n = normalize_name(n);
                if n.is_empty() {
                    Err(RegistryError::EmptyName)
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let base = norm(&base)?;
    let novel = norm(&novel)?;
    let broad = norm(broad_names)?;
    if broad.len() != novel.len() {
        return Err(RegistryError::WrongBroadCount { expected: novel.len(), got: broad.len() });
    }
    let mut seen = BTreeSet::new();
    for n in base.iter().chain(&novel) {
        if !seen.insert(n.clone()) {
            return Err(RegistryError::DuplicateName(n.clone()));
        }
    }
    for n in &broad {
        if !seen.insert(n.clone()) {
            return if base.contains(n) || novel.contains(n) {
                Err(RegistryError::BroadCollision(n.clone()))
            } else {
                Err(RegistryError::DuplicateName(n.clone()))
            };
        }
    }
    let registry = ClassRegistry {
        base_names: base.clone(),
        novel_names: novel.clone(),
        broad_names: broad.clone(),
        setting_id: setting.id(),
    };
    if let Some(v) = validate_registry(&registry).first() {
        return Err(RegistryError::Invalid(v.to_string()));
    }
    let t1 = TaskSpec {
        task_id: 1,
        visible_classes: base.clone(),
        label_space: base.iter().chain(&broad).cloned().collect(),
    };
    let t2 = TaskSpec {
        task_id: 2,
        visible_classes: novel.clone(),
        label_space: base.iter().chain(&novel).cloned().collect(),
    };
    Ok(IncrementalSchedule { registry, tasks: vec![t1, t2] })
}

/// Position of `name` in `label_space`. Background is never part of a label space.
pub fn label_index(label_space: &[String], name: &str) -> Result<usize, RegistryError> {
    label_space
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| RegistryError::NotFound(name.to_string()))
}
