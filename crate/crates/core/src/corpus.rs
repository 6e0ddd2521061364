//! Corpus construction from case-report articles: find patient-note
//! sections by heading, drop noisy notes, and turn the figures of every
//! article that kept a note into image-caption pairs.
//!
//! Input is one JSON article per line (`*.jsonl` files in a directory).
//! Output is a corpus directory with `pairs.jsonl`, `notes.jsonl`,
//! `images/<pair_id>.ten` and a plain-text `summary.txt`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use regex::{RegexSet, RegexSetBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::store::SourceTag;
use crate::tensor::read_tensor;

pub const DEFAULT_PATTERNS: [&str; 5] = [
    "case report",
    "case presentation",
    "case description",
    "patient presentation",
    "clinical case",
];

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const NOTES_FILE: &str = "notes.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Figure {
    pub figure_id: String,
    pub caption: String,
    /// Tensor file, relative to the directory holding the article file.
    pub image_ref: PathBuf,
}

fn default_tag() -> SourceTag {
    SourceTag::Pmcpm
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleDocument {
    pub article_id: String,
    #[serde(default)]
    pub sections: Vec<Section>,
    #[serde(default)]
    pub figures: Vec<Figure>,
    #[serde(default = "default_tag")]
    pub source_tag: SourceTag,
}

impl ArticleDocument {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.article_id.trim().is_empty() {
            return Err("empty article_id".into());
        }
        let mut seen = HashSet::new();
        for f in &self.figures {
            if !seen.insert(f.figure_id.as_str()) {
                return Err(format!("duplicate figure_id `{}`", f.figure_id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientNote {
    pub article_id: String,
    pub heading: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextPair {
    pub pair_id: u64,
    pub article_id: String,
    pub figure_id: String,
    pub caption: String,
    pub image: PathBuf,
    pub source_tag: SourceTag,
}

/// Stable identifier of a figure: leading 8 bytes (LE) of
/// sha256(article_id NUL figure_id).
pub fn pair_id_of(article_id: &str, figure_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(article_id.as_bytes());
    h.update([0u8]);
    h.update(figure_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Case-insensitive heading patterns; a heading matches if any pattern
/// matches anywhere in it.
#[derive(Clone, Debug)]
pub struct PatternSet {
    set: RegexSet,
}

impl PatternSet {
    pub fn new<S: AsRef<str>>(patterns: impl IntoIterator<Item = S>) -> Result<Self> {
        let set = RegexSetBuilder::new(patterns).case_insensitive(true).build()?;
        Ok(PatternSet { set })
    }

    /// One pattern per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if lines.is_empty() {
            return Err(RammError::Config("pattern file has no patterns".into()));
        }
        Self::new(lines)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::parse(&text)
    }

    pub fn matches(&self, heading: &str) -> bool {
        self.set.is_match(heading)
    }
}

impl Default for PatternSet {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERNS).expect("default patterns compile")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub min_chars: usize,
    /// Notes whose share of non-alphabetic characters (whitespace ignored)
    /// exceeds this are dropped.
    pub max_non_alpha: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_chars: 200,
            max_non_alpha: 0.5,
        }
    }
}

pub fn extract_case_sections(doc: &ArticleDocument, patterns: &PatternSet) -> Vec<PatientNote> {
    doc.sections
        .iter()
        .filter(|s| patterns.matches(&s.heading))
        .map(|s| PatientNote {
            article_id: doc.article_id.clone(),
            heading: s.heading.clone(),
            text: s.body.trim().to_string(),
        })
        .collect()
}

fn non_alpha_share(text: &str) -> f64 {
    let (mut total, mut other) = (0usize, 0usize);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if !c.is_alphabetic() {
            other += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        other as f64 / total as f64
    }
}

/// Length, character-mix and exact-duplicate filters; first occurrence of
/// a duplicated text survives.
pub fn filter_notes(notes: Vec<PatientNote>, cfg: &FilterConfig) -> Vec<PatientNote> {
    let mut seen = HashSet::new();
    notes
        .into_iter()
        .filter(|n| n.text.chars().count() >= cfg.min_chars)
        .filter(|n| non_alpha_share(&n.text) <= cfg.max_non_alpha)
        .filter(|n| seen.insert(n.text.clone()))
        .collect()
}

/// Pairs for every captioned figure of `doc`, provided one of `notes`
/// belongs to it. Image references are resolved against `root`.
pub fn pair_figures(doc: &ArticleDocument, notes: &[PatientNote], root: &Path) -> Vec<ImageTextPair> {
    if !notes.iter().any(|n| n.article_id == doc.article_id) {
        return Vec::new();
    }
    doc.figures
        .iter()
        .filter(|f| !f.caption.trim().is_empty())
        .map(|f| ImageTextPair {
            pair_id: pair_id_of(&doc.article_id, &f.figure_id),
            article_id: doc.article_id.clone(),
            figure_id: f.figure_id.clone(),
            caption: f.caption.trim().to_string(),
            image: root.join(&f.image_ref),
            source_tag: doc.source_tag,
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSummary {
    pub files: usize,
    pub articles_seen: usize,
    pub malformed: usize,
    pub notes_matched: usize,
    pub notes_kept: usize,
    pub pairs_emitted: usize,
    pub errors: Vec<String>,
}

impl CorpusSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "files\t{}", self.files);
        let _ = writeln!(s, "articles_seen\t{}", self.articles_seen);
        let _ = writeln!(s, "malformed\t{}", self.malformed);
        let _ = writeln!(s, "notes_matched\t{}", self.notes_matched);
        let _ = writeln!(s, "notes_kept\t{}", self.notes_kept);
        let _ = writeln!(s, "pairs_emitted\t{}", self.pairs_emitted);
        for e in &self.errors {
            let _ = writeln!(s, "error\t{e}");
        }
        s
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(RammError::from))
        .collect()
}

/// Write a corpus directory. Each pair's image is copied to
/// `images/<pair_id>.ten` and the emitted records point there (relative to
/// `out`). Returns the emitted records.
pub fn emit_corpus(
    out: &Path,
    pairs: &[ImageTextPair],
    notes: &[PatientNote],
    summary: &CorpusSummary,
) -> Result<Vec<ImageTextPair>> {
    fs::create_dir_all(out.join(IMAGES_DIR))?;
    let mut emitted = Vec::with_capacity(pairs.len());
    for p in pairs {
        let rel = PathBuf::from(IMAGES_DIR).join(format!("{:016x}.ten", p.pair_id));
        let dest = out.join(&rel);
        if fs::canonicalize(&p.image).ok() != fs::canonicalize(&dest).ok() {
            fs::copy(&p.image, &dest)?;
        }
        emitted.push(ImageTextPair {
            image: rel,
            ..p.clone()
        });
    }
    write_jsonl(&out.join(PAIRS_FILE), &emitted)?;
    write_jsonl(&out.join(NOTES_FILE), notes)?;
    fs::write(out.join(SUMMARY_FILE), summary.render())?;
    Ok(emitted)
}

/// Pairs of a corpus directory, image paths still relative to `dir`.
pub fn read_corpus(dir: &Path) -> Result<Vec<ImageTextPair>> {
    read_jsonl(&dir.join(PAIRS_FILE))
}

pub fn read_notes(dir: &Path) -> Result<Vec<PatientNote>> {
    read_jsonl(&dir.join(NOTES_FILE))
}

#[derive(Clone, Debug, Default)]
pub struct HarvestConfig {
    pub patterns: PatternSet,
    pub filter: FilterConfig,
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Harvest {
    pub notes: Vec<PatientNote>,
    pub pairs: Vec<ImageTextPair>,
    pub summary: CorpusSummary,
}

fn load_articles(input: &Path, summary: &mut CorpusSummary) -> Result<Vec<ArticleDocument>> {
    if !input.is_dir() {
        return Err(RammError::MissingArtifact(input.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    summary.files = files.len();
    let mut docs = Vec::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for (i, line) in fs::read_to_string(&f)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            summary.articles_seen += 1;
            let parsed = serde_json::from_str::<ArticleDocument>(line)
                .map_err(|e| e.to_string())
                .and_then(|d| d.validate().map(|_| d));
            match parsed {
                Ok(d) => docs.push(d),
                Err(e) => {
                    summary.malformed += 1;
                    summary.errors.push(format!("{name}:{}: {e}", i + 1));
                }
            }
        }
    }
    Ok(docs)
}

/// Run extraction, filtering and pairing over every article file in `input`.
/// Malformed articles and unreadable figure images are reported in the
/// summary and skipped.
pub fn harvest_documents(input: &Path, cfg: &HarvestConfig) -> Result<Harvest> {
    let mut summary = CorpusSummary::default();
    let docs = load_articles(input, &mut summary)?;
    let matched: Vec<PatientNote> = cfg
        .exec
        .map(&docs, |_, d| extract_case_sections(d, &cfg.patterns))
        .into_iter()
        .flatten()
        .collect();
    summary.notes_matched = matched.len();
    let notes = filter_notes(matched, &cfg.filter);
    summary.notes_kept = notes.len();
    let candidates: Vec<ImageTextPair> = cfg
        .exec
        .map(&docs, |_, d| pair_figures(d, &notes, input))
        .into_iter()
        .flatten()
        .collect();
    let readable = cfg.exec.map(&candidates, |_, p| read_tensor(&p.image).map(|_| ()));
    let mut pairs = Vec::with_capacity(candidates.len());
    for (p, ok) in candidates.into_iter().zip(readable) {
        match ok {
            Ok(()) => pairs.push(p),
            Err(e) => summary
                .errors
                .push(format!("{}/{}: image {}: {e}", p.article_id, p.figure_id, p.image.display())),
        }
    }
    summary.pairs_emitted = pairs.len();
    Ok(Harvest { notes, pairs, summary })
}

pub fn harvest(input: &Path, out: &Path, cfg: &HarvestConfig) -> Result<CorpusSummary> {
    let h = harvest_documents(input, cfg)?;
    emit_corpus(out, &h.pairs, &h.notes, &h.summary)?;
    Ok(h.summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn section(h: &str, b: &str) -> Section {
        Section {
            heading: h.into(),
            body: b.into(),
        }
    }

    fn prose(n: usize) -> String {
        "the patient presented with a mass ".repeat(n)
    }

    #[test]
    fn headings_match_case_insensitively() {
        let p = PatternSet::default();
        assert!(p.matches("Case Report"));
        assert!(p.matches("2. CLINICAL CASE"));
        assert!(!p.matches("Methods"));
        let custom = PatternSet::parse("# comment\n\n^history$\n").unwrap();
        assert!(custom.matches("History") && !custom.matches("Family history"));
        assert!(PatternSet::parse("(unclosed").is_err());
        assert!(PatternSet::parse("\n# nothing\n").is_err());
    }

    #[test]
    fn one_matching_section_gives_one_note() {
        let doc = ArticleDocument {
            article_id: "a1".into(),
            sections: vec![section("Introduction", "x"), section("Case presentation", "  body text  "), section("Methods", "y")],
            figures: vec![],
            source_tag: SourceTag::Pmcpm,
        };
        let notes = extract_case_sections(&doc, &PatternSet::default());
        assert_eq!(
            notes,
            vec![PatientNote {
                article_id: "a1".into(),
                heading: "Case presentation".into(),
                text: "body text".into(),
            }]
        );
    }

    #[test]
    fn filters() {
        let note = |t: String| PatientNote {
            article_id: "a".into(),
            heading: "Case report".into(),
            text: t,
        };
        let cfg = FilterConfig::default();
        assert!(filter_notes(vec![note("0123456789".into())], &cfg).is_empty());
        assert_eq!(filter_notes(vec![note(prose(7)), note(prose(7))], &cfg).len(), 1);
        let digits = note(format!("{} {}", "ab".repeat(60), "1".repeat(121)));
        assert!(filter_notes(vec![digits], &cfg).is_empty());
        let half = note(format!("{} {}", "ab".repeat(60), "1".repeat(120)));
        assert_eq!(filter_notes(vec![half], &cfg).len(), 1);
    }

    #[test]
    fn figures_need_a_surviving_note() {
        let fig = |id: &str, cap: &str| Figure {
            figure_id: id.into(),
            caption: cap.into(),
            image_ref: PathBuf::from(format!("{id}.ten")),
        };
        let doc = ArticleDocument {
            article_id: "a2".into(),
            sections: vec![],
            figures: vec![fig("f1", "CT of the chest"), fig("f2", " "), fig("f3", "MRI")],
            source_tag: SourceTag::Roco,
        };
        assert!(pair_figures(&doc, &[], Path::new("r")).is_empty());
        let note = PatientNote {
            article_id: "a2".into(),
            heading: String::new(),
            text: String::new(),
        };
        let pairs = pair_figures(&doc, &[note], Path::new("r"));
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].pair_id, pair_id_of("a2", "f1"));
        assert_eq!(pairs[1].image, Path::new("r/f3.ten"));
        assert_eq!(pairs[1].source_tag, SourceTag::Roco);
        assert_ne!(pair_id_of("a2", "f1"), pair_id_of("a2f", "1"));
    }

    #[test]
    fn validation() {
        let mut d = ArticleDocument {
            article_id: " ".into(),
            sections: vec![],
            figures: vec![],
            source_tag: SourceTag::Pmcpm,
        };
        assert!(d.validate().is_err());
        d.article_id = "x".into();
        let f = Figure {
            figure_id: "f".into(),
            caption: "c".into(),
            image_ref: "f.ten".into(),
        };
        d.figures = vec![f.clone(), f];
        assert!(d.validate().is_err());
        let parsed: ArticleDocument = serde_json::from_str(r#"{"article_id":"q"}"#).unwrap();
        assert_eq!(parsed.source_tag, SourceTag::Pmcpm);
    }

    #[test]
    fn empty_input_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let (input, out) = (dir.path().join("in"), dir.path().join("out"));
        fs::create_dir(&input).unwrap();
        let s = harvest(&input, &out, &HarvestConfig::default()).unwrap();
        assert_eq!(s, CorpusSummary::default());
        assert!(read_corpus(&out).unwrap().is_empty());
        assert!(matches!(
            harvest(&dir.path().join("none"), &out, &HarvestConfig::default()),
            Err(RammError::MissingArtifact(_))
        ));
    }
}
