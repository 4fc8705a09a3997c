//! Line-delimited JSON corpora, loaders with line-numbered diagnostics, and
//! the hash manifest written next to generated corpora.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::AnnotatedAd;
use crate::extraction::{Skill, Taxonomy};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One sentence labelled with one skill.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingPair {
    pub sentence: String,
    pub skill_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSkill {
    pub skill_id: String,
    pub score: f64,
}

/// Ranked or extracted skills for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ad_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
    pub predictions: Vec<ScoredSkill>,
}

/// A job ad reduced to its title and skill names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitlePairRecord {
    pub title: String,
    pub skills: Vec<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses every non-blank line, returning 1-based line numbers with records.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::data(path.display(), i + 1, e))?;
        out.push((i + 1, record));
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_text(path, &to_jsonl(records)?)
}

pub fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    let records: Vec<(usize, Skill)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (line, s) in &records {
        if !seen.insert(s.id.clone()) {
            return Err(Error::data(path.display(), *line, format!("duplicate skill id {}", s.id)));
        }
        if s.id.is_empty() || s.name.trim().is_empty() {
            return Err(Error::data(path.display(), *line, "skill id and name must be non-empty"));
        }
    }
    if records.is_empty() {
        return Err(Error::data(path.display(), 0, "taxonomy is empty"));
    }
    Taxonomy::new(records.into_iter().map(|(_, s)| s).collect())
}

pub fn load_pairs(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<TrainingPair>> {
    let records: Vec<(usize, TrainingPair)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, p) in records {
        if taxonomy.get(&p.skill_id).is_none() {
            return Err(Error::data(path.display(), line, format!("unknown skill id {}", p.skill_id)));
        }
        if p.sentence.trim().is_empty() {
            return Err(Error::data(path.display(), line, "empty sentence"));
        }
        if !seen.insert(p.clone()) {
            return Err(Error::data(path.display(), line, "duplicate sentence-skill pair"));
        }
        out.push(p);
    }
    Ok(out)
}

/// Loads annotated ads; with a taxonomy, every cluster label must exist in it.
pub fn load_annotations(path: &Path, taxonomy: Option<&Taxonomy>) -> Result<Vec<AnnotatedAd>> {
    let records: Vec<(usize, AnnotatedAd)> = read_jsonl(path)?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, ad) in records {
        if !ids.insert(ad.ad_id.clone()) {
            return Err(Error::data(path.display(), line, format!("duplicate ad id {}", ad.ad_id)));
        }
        for s in &ad.sentences {
            s.validate().map_err(|e| Error::data(path.display(), line, e))?;
            if let Some(tax) = taxonomy {
                if let Some(bad) = s.gold_labels().into_iter().find(|id| tax.get(id).is_none()) {
                    return Err(Error::data(path.display(), line, format!("unknown skill id {bad}")));
                }
            }
        }
        out.push(ad);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let records: Vec<(usize, PredictionRecord)> = read_jsonl(path)?;
    for (line, r) in &records {
        if let Some(bad) = r.predictions.iter().find(|p| !p.score.is_finite()) {
            return Err(Error::data(path.display(), *line, format!("non-finite score for {}", bad.skill_id)));
        }
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

pub fn load_title_pairs(path: &Path) -> Result<Vec<TitlePairRecord>> {
    let records: Vec<(usize, TitlePairRecord)> = read_jsonl(path)?;
    for (line, r) in &records {
        if r.title.trim().is_empty() {
            return Err(Error::data(path.display(), *line, "empty title"));
        }
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

pub fn save_taxonomy(path: &Path, taxonomy: &Taxonomy) -> Result<()> {
    write_jsonl(path, taxonomy.skills())
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub records: usize,
    pub sha256: String,
}

/// Record counts and content hashes of the files in a corpus directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub files: BTreeMap<String, ManifestEntry>,
}

impl CorpusManifest {
    /// Describes `names` inside `dir` as they currently are on disk.
    pub fn describe(dir: &Path, names: &[&str]) -> Result<Self> {
        let mut files = BTreeMap::new();
        for name in names {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let records = bytes
                .split(|b| *b == b'\n')
                .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
                .count();
            files.insert(
                name.to_string(),
                ManifestEntry {
                    records,
                    sha256: sha256_hex(&bytes),
                },
            );
        }
        Ok(Self {
            format_version: CORPUS_FORMAT_VERSION,
            files,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_text(&dir.join(MANIFEST_FILE), &text)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        Ok(serde_json::from_str(&read_text(&path)?)?)
    }

    /// Fails when any listed file is missing or its bytes changed.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        if self.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "corpus format version {} (expected {CORPUS_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let names: Vec<&str> = self.files.keys().map(String::as_str).collect();
        let actual = Self::describe(dir, &names)?;
        for (name, entry) in &self.files {
            if actual.files[name] != *entry {
                return Err(Error::Invalid(format!("{name} does not match its manifest entry")));
            }
        }
        Ok(())
    }
}

/// Gold label sets of the relevant, labelled sentences, in file order.
pub fn gold_sets(ads: &[AnnotatedAd]) -> Vec<(String, usize, BTreeSet<String>)> {
    let mut out = Vec::new();
    for ad in ads {
        for (i, s) in ad.sentences.iter().enumerate() {
            out.push((ad.ad_id.clone(), i, s.gold_labels()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{AnnotatedSentence, Part};

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn taxonomy_file(dir: &Path) -> std::path::PathBuf {
        write(
            dir,
            "tax.jsonl",
            concat!(
                "{\"id\":\"s1\",\"name\":\"data models\"}\n",
                "{\"id\":\"s2\",\"name\":\"create data models\",\"description\":\"build them\"}\n",
                "{\"id\":\"s3\",\"name\":\"design database scheme\",\"synonyms\":[\"schema design\"]}\n",
            ),
        )
    }

    #[test]
    fn taxonomy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tax = load_taxonomy(&taxonomy_file(dir.path())).unwrap();
        assert_eq!(tax.len(), 3);
        let out = dir.path().join("out.jsonl");
        save_taxonomy(&out, &tax).unwrap();
        assert_eq!(load_taxonomy(&out).unwrap(), tax);
    }

    #[test]
    fn duplicate_skill_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.jsonl", "{\"id\":\"a\",\"name\":\"x\"}\n\n{\"id\":\"a\",\"name\":\"y\"}\n");
        let err = load_taxonomy(&p).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn pair_validation() {
        let dir = tempfile::tempdir().unwrap();
        let tax = load_taxonomy(&taxonomy_file(dir.path())).unwrap();
        let good = write(dir.path(), "p.jsonl", "{\"sentence\":\"we model data\",\"skill_id\":\"s1\"}\n");
        assert_eq!(load_pairs(&good, &tax).unwrap().len(), 1);
        let missing = write(
            dir.path(),
            "m.jsonl",
            "{\"sentence\":\"a\",\"skill_id\":\"s1\"}\n{\"sentence\":\"b\",\"skill_id\":\"s9\"}\n",
        );
        let err = load_pairs(&missing, &tax).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("s9"), "{err}");
        let dup = write(
            dir.path(),
            "d.jsonl",
            "{\"sentence\":\"a\",\"skill_id\":\"s1\"}\n{\"sentence\":\"a\",\"skill_id\":\"s1\"}\n",
        );
        assert!(load_pairs(&dup, &tax).unwrap_err().to_string().contains(":2:"));
        let broken = write(dir.path(), "b.jsonl", "{\"sentence\":\"a\"\n");
        assert!(load_pairs(&broken, &tax).unwrap_err().to_string().contains(":1:"));
    }

    #[test]
    fn annotated_ad_example() {
        let dir = tempfile::tempdir().unwrap();
        let tax = load_taxonomy(&taxonomy_file(dir.path())).unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            concat!(
                "{\"ad_id\":\"ad1\",\"split\":\"dev\",\"title\":\"Data Engineer\",\"sentences\":[",
                "{\"text\":\"Extensive experience in Data Modeling\",\"relevant\":true,",
                "\"clusters\":[[\"s1\",\"s2\",\"s3\"]]}]}\n"
            ),
        );
        let ads = load_annotations(&p, Some(&tax)).unwrap();
        assert_eq!(ads[0].sentences[0].clusters.len(), 1);
        assert_eq!(ads[0].sentences[0].clusters[0].len(), 3);

        let out = dir.path().join("round.jsonl");
        write_jsonl(&out, &ads).unwrap();
        assert_eq!(load_annotations(&out, Some(&tax)).unwrap(), ads);

        let unknown = write(
            dir.path(),
            "u.jsonl",
            "{\"ad_id\":\"x\",\"split\":\"test\",\"sentences\":[{\"text\":\"t\",\"relevant\":true,\"clusters\":[[\"zz\"]]}]}\n",
        );
        assert!(load_annotations(&unknown, Some(&tax)).unwrap_err().to_string().contains("zz"));
    }

    #[test]
    fn manifest_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let ads = vec![AnnotatedAd {
            ad_id: "a".into(),
            split: Part::Dev,
            subset: None,
            title: None,
            sentences: vec![AnnotatedSentence {
                text: "x".into(),
                relevant: false,
                clusters: vec![],
            }],
        }];
        write_jsonl(&dir.path().join("dev.jsonl"), &ads).unwrap();
        let m = CorpusManifest::describe(dir.path(), &["dev.jsonl"]).unwrap();
        assert_eq!(m.files["dev.jsonl"].records, 1);
        m.write(dir.path()).unwrap();
        let back = CorpusManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        fs::write(dir.path().join("dev.jsonl"), "{}\n").unwrap();
        assert!(back.verify(dir.path()).is_err());
    }
}
