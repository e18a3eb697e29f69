//! Line-delimited corpus documents.
//!
//! One record per line, tab-separated `key=value` fields with fixed names:
//! `id`, `image`, `boxes`, `report`. The report value is structured-report
//! grammar text with backslash-escaped newlines; boxes are
//! `Header:x0,y0,x1,y1[+x0,y0,x1,y1...]` groups joined with `;`. Image
//! paths resolve relative to the document's directory and must exist at
//! load time.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cwcd_core::image::{BoundingBox, CategoryBoxSet};
use cwcd_core::report::{parse_structured, serialize_structured, Category, StructuredReport};

#[derive(Debug, Clone)]
pub struct CorpusRecord {
    pub id: String,
    /// Resolved path; empty records (eval-only documents) have none.
    pub image: Option<PathBuf>,
    pub boxes: CategoryBoxSet,
    pub report: Option<StructuredReport>,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusDocument {
    pub records: Vec<CorpusRecord>,
}

pub fn escape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out
}

pub fn unescape_text(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            other => bail!("bad escape sequence \\{:?}", other),
        }
    }
    Ok(out)
}

pub fn format_boxes(boxes: &CategoryBoxSet) -> String {
    let mut groups = Vec::new();
    for category in boxes.categories() {
        let list = boxes
            .boxes_for(category)
            .iter()
            .map(|b| format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1))
            .collect::<Vec<_>>()
            .join("+");
        groups.push(format!("{}:{}", category.header(), list));
    }
    groups.join(";")
}

pub fn parse_box_list(text: &str) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for quad in text.split('+') {
        let parts: Vec<&str> = quad.split(',').collect();
        if parts.len() != 4 {
            bail!("box needs four coordinates, got {quad:?}");
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|e| anyhow!("{e}: {p:?}")))
            .collect::<Result<_>>()?;
        out.push(BoundingBox::new(nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(out)
}

pub fn parse_boxes(text: &str) -> Result<CategoryBoxSet> {
    let mut set = CategoryBoxSet::new();
    if text.is_empty() {
        return Ok(set);
    }
    for group in text.split(';') {
        let (name, list) = group
            .rsplit_once(':')
            .ok_or_else(|| anyhow!("box group missing ':': {group:?}"))?;
        let category = Category::from_header(name)
            .or_else(|| Category::from_short_name(name))
            .ok_or_else(|| anyhow!("unknown category {name:?} in boxes"))?;
        for bbox in parse_box_list(list)? {
            set.insert(category, bbox);
        }
    }
    Ok(set)
}

impl CorpusDocument {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading corpus {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut id = None;
            let mut image = None;
            let mut boxes = CategoryBoxSet::new();
            let mut report = None;
            for field in line.split('\t') {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| anyhow!("line {lineno}: field without '=': {field:?}"))?;
                match key {
                    "id" => id = Some(value.to_string()),
                    "image" => {
                        if !value.is_empty() {
                            image = Some(dir.join(value));
                        }
                    }
                    "boxes" => {
                        boxes =
                            parse_boxes(value).with_context(|| format!("line {lineno}: boxes"))?
                    }
                    "report" => {
                        if !value.is_empty() {
                            let text = unescape_text(value)
                                .with_context(|| format!("line {lineno}: report"))?;
                            report = Some(
                                parse_structured(&text)
                                    .map_err(|e| anyhow!("line {lineno}: report: {e}"))?,
                            );
                        }
                    }
                    other => bail!("line {lineno}: unknown field {other:?}"),
                }
            }
            let id = id.ok_or_else(|| anyhow!("line {lineno}: missing id field"))?;
            if !seen.insert(id.clone()) {
                bail!("line {lineno}: duplicate id {id:?}");
            }
            if let Some(image_path) = &image {
                if !image_path.exists() {
                    bail!(
                        "line {lineno}: image {} does not exist",
                        image_path.display()
                    );
                }
            }
            records.push(CorpusRecord {
                id,
                image,
                boxes,
                report,
            });
        }
        Ok(Self { records })
    }

    /// Renders records with image paths relative to `base_dir`.
    pub fn render(&self, base_dir: &Path) -> String {
        let mut out = String::new();
        for record in &self.records {
            let image = record
                .image
                .as_ref()
                .map(|p| {
                    p.strip_prefix(base_dir)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .into_owned()
                })
                .unwrap_or_default();
            let report = record
                .report
                .as_ref()
                .map(|r| escape_text(&serialize_structured(r)))
                .unwrap_or_default();
            writeln!(
                out,
                "id={}\timage={}\tboxes={}\treport={}",
                record.id,
                image,
                format_boxes(&record.boxes),
                report
            )
            .expect("string write");
        }
        out
    }
}

/// id -> report pairs from any record document carrying report fields.
pub fn reports_by_id(doc: &CorpusDocument) -> Result<Vec<(String, StructuredReport)>> {
    let mut out = Vec::new();
    for record in &doc.records {
        let report = record
            .report
            .clone()
            .ok_or_else(|| anyhow!("record {} has no report field", record.id))?;
        out.push((record.id.clone(), report));
    }
    Ok(out)
}
