//! The eight-header structured report: data model, text grammar, dataset
//! splitting and assembly of per-category decoder outputs.
//!
//! Grammar: a section is a canonical header line ending in `:`, followed by
//! zero or more lines starting `- `. Sections may appear in any order in the
//! input but are stored and emitted canonically. "Abdomen" is accepted as a
//! parse-time alias for the canonical "Abdominal" header.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::vocab::{TokenSequence, Vocabulary};

/// Decoded line that marks a category as having no findings.
pub const NO_FINDINGS_SENTINEL: &str = "None.";

/// Default per-category prompt template; `{header}` is substituted.
pub const PROMPT_TEMPLATE: &str = "Describe findings for: {header}.";

/// The eight anatomical categories, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    LungsAndAirways,
    Pleura,
    Cardiovascular,
    HilaAndMediastinum,
    TubesCathetersSupportDevices,
    MusculoskeletalAndChestWall,
    Abdominal,
    Other,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::LungsAndAirways,
        Category::Pleura,
        Category::Cardiovascular,
        Category::HilaAndMediastinum,
        Category::TubesCathetersSupportDevices,
        Category::MusculoskeletalAndChestWall,
        Category::Abdominal,
        Category::Other,
    ];

    /// Canonical header spelling.
    pub fn header(self) -> &'static str {
        match self {
            Category::LungsAndAirways => "Lungs and Airways",
            Category::Pleura => "Pleura",
            Category::Cardiovascular => "Cardiovascular",
            Category::HilaAndMediastinum => "Hila and Mediastinum",
            Category::TubesCathetersSupportDevices => "Tubes, Catheters, and Support Devices",
            Category::MusculoskeletalAndChestWall => "Musculoskeletal and Chest Wall",
            Category::Abdominal => "Abdominal",
            Category::Other => "Other",
        }
    }

    /// Compact whitespace-free name, used inside conditioning feature
    /// strings and file stems.
    pub fn short_name(self) -> &'static str {
        match self {
            Category::LungsAndAirways => "lungs",
            Category::Pleura => "pleura",
            Category::Cardiovascular => "cardio",
            Category::HilaAndMediastinum => "hila",
            Category::TubesCathetersSupportDevices => "tubes",
            Category::MusculoskeletalAndChestWall => "msk",
            Category::Abdominal => "abdominal",
            Category::Other => "other",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.short_name() == name)
    }

    /// Resolves a header string, accepting the "Abdomen" alias.
    pub fn from_header(header: &str) -> Option<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.header() == header)
            .or(match header {
                "Abdomen" => Some(Category::Abdominal),
                _ => None,
            })
    }

    /// The category prompt for this header.
    pub fn prompt(self) -> String {
        PROMPT_TEMPLATE.replace("{header}", self.header())
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.header())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("line {0}: unknown header {1:?}")]
    UnknownHeader(usize, String),
    #[error("line {0}: duplicate header {1:?}")]
    DuplicateHeader(usize, String),
    #[error("line {0}: bullet before any header")]
    BulletBeforeHeader(usize),
    #[error("line {0}: empty bullet")]
    EmptyBullet(usize),
    #[error("line {0}: expected header or bullet, got {1:?}")]
    Unparseable(usize, String),
    #[error("observation contains a line break: {0:?}")]
    MultilineObservation(String),
    #[error("empty observation string")]
    EmptyObservation,
    #[error("category {0}: {1}")]
    Assembly(Category, String),
}

/// Map from present categories to their ordered observation lists.
/// A category may be present with zero observations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StructuredReport {
    sections: BTreeMap<Category, Vec<String>>,
}

impl StructuredReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `category` present and appends an observation.
    pub fn add_observation(
        &mut self,
        category: Category,
        observation: impl Into<String>,
    ) -> Result<(), ReportError> {
        let obs = observation.into();
        if obs.is_empty() {
            return Err(ReportError::EmptyObservation);
        }
        if obs.contains('\n') {
            return Err(ReportError::MultilineObservation(obs));
        }
        self.sections.entry(category).or_default().push(obs);
        Ok(())
    }

    /// Marks `category` present even if it stays empty.
    pub fn mark_present(&mut self, category: Category) {
        self.sections.entry(category).or_default();
    }

    pub fn is_present(&self, category: Category) -> bool {
        self.sections.contains_key(&category)
    }

    pub fn observations(&self, category: Category) -> &[String] {
        self.sections
            .get(&category)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Present categories in canonical order.
    pub fn present(&self) -> impl Iterator<Item = Category> + '_ {
        self.sections.keys().copied()
    }

    pub fn present_count(&self) -> usize {
        self.sections.len()
    }

    pub fn total_observations(&self) -> usize {
        self.sections.values().map(Vec::len).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.sections.is_empty()
    }
}

/// Parses the structured grammar. Headers may arrive in any order; storage
/// is canonical.
pub fn parse_structured(text: &str) -> Result<StructuredReport, ReportError> {
    let mut report = StructuredReport::new();
    let mut current: Option<Category> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("- ") {
            let category = current.ok_or(ReportError::BulletBeforeHeader(lineno))?;
            let obs = rest.trim();
            if obs.is_empty() {
                return Err(ReportError::EmptyBullet(lineno));
            }
            report.add_observation(category, obs)?;
        } else if line == "-" {
            return Err(ReportError::EmptyBullet(lineno));
        } else if let Some(name) = line.strip_suffix(':') {
            let category = Category::from_header(name)
                .ok_or_else(|| ReportError::UnknownHeader(lineno, name.to_string()))?;
            if report.is_present(category) {
                return Err(ReportError::DuplicateHeader(lineno, name.to_string()));
            }
            report.mark_present(category);
            current = Some(category);
        } else {
            return Err(ReportError::Unparseable(lineno, line.to_string()));
        }
    }
    Ok(report)
}

/// Canonical emitter: present categories in canonical order, `Header:` line,
/// one `- observation` line each, trailing newline. Empty report is the
/// empty string.
pub fn serialize_structured(report: &StructuredReport) -> String {
    let mut out = String::new();
    for category in report.present() {
        out.push_str(category.header());
        out.push_str(":\n");
        for obs in report.observations(category) {
            out.push_str("- ");
            out.push_str(obs);
            out.push('\n');
        }
    }
    out
}

/// One per-category training/eval record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRecord {
    pub image_id: String,
    pub category: Category,
    pub observations: Vec<String>,
    pub prompt: String,
}

/// Splits a corpus of reports into per-category record lists. With
/// `negatives` on, categories absent from a report contribute an
/// empty-observation record so models can learn the no-findings sentinel.
pub fn split_by_category(
    corpus: &[(String, StructuredReport)],
    negatives: bool,
) -> BTreeMap<Category, Vec<CategoryRecord>> {
    let mut out: BTreeMap<Category, Vec<CategoryRecord>> = BTreeMap::new();
    for category in Category::ALL {
        out.insert(category, Vec::new());
    }
    for (image_id, report) in corpus {
        for category in Category::ALL {
            if report.is_present(category) {
                out.get_mut(&category)
                    .expect("all categories")
                    .push(CategoryRecord {
                        image_id: image_id.clone(),
                        category,
                        observations: report.observations(category).to_vec(),
                        prompt: category.prompt(),
                    });
            } else if negatives {
                out.get_mut(&category)
                    .expect("all categories")
                    .push(CategoryRecord {
                        image_id: image_id.clone(),
                        category,
                        observations: Vec::new(),
                        prompt: category.prompt(),
                    });
            }
        }
    }
    out
}

/// Assembles per-category decoded sequences into a report. A category whose
/// decoded text is empty or equals the sentinel is absent; otherwise each
/// decoded line becomes one observation (a leading `- ` is stripped).
pub fn assemble(
    outputs: &BTreeMap<Category, TokenSequence>,
    vocab: &Vocabulary,
) -> Result<StructuredReport, ReportError> {
    let mut report = StructuredReport::new();
    for (&category, seq) in outputs {
        let text = vocab
            .detokenize(seq)
            .map_err(|e| ReportError::Assembly(category, e.to_string()))?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed == NO_FINDINGS_SENTINEL {
            continue;
        }
        for line in trimmed.lines() {
            let line = line.trim();
            if line.is_empty() || line == NO_FINDINGS_SENTINEL {
                continue;
            }
            let obs = line.strip_prefix("- ").unwrap_or(line);
            if obs.is_empty() {
                return Err(ReportError::Assembly(category, "empty bullet line".into()));
            }
            report.add_observation(category, obs)?;
        }
        if !report.is_present(category) {
            // every line was blank or sentinel
            continue;
        }
    }
    Ok(report)
}
