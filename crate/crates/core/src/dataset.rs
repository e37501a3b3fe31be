//! Labeled utterance corpora, stratified splits and per-subject sampling plans.

use crate::error::{Error, IoContext, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// The ten inspection commands, in class-index order.
pub const INSPECTION_KEYWORDS: [&str; 10] =
    ["BIRDS", "Task", "One", "Two", "Three", "Four", "Backward", "Continue", "Hover", "Stop"];

/// Spoken digits used by the larger-group corpus.
pub const DIGIT_KEYWORDS: [&str; 10] =
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// Minimum records per (subject, keyword) cell for a three-way split.
pub const MIN_CELL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub path: PathBuf,
    pub subject_id: u32,
    pub keyword_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<UtteranceRecord>,
    pub subjects: BTreeSet<u32>,
    pub keywords: Vec<String>,
}

/// Utterances per keyword requested from each subject.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub per_subject_counts: BTreeMap<u32, usize>,
}

impl SamplePlan {
    /// Plan from a count vector aligned with `subjects` (`(20,30,20,20,20)` style).
    pub fn from_counts(subjects: &[u32], counts: &[usize]) -> Result<Self> {
        if subjects.len() != counts.len() {
            return Err(Error::Invalid(format!(
                "{} subjects but {} counts",
                subjects.len(),
                counts.len()
            )));
        }
        Ok(Self { per_subject_counts: subjects.iter().copied().zip(counts.iter().copied()).collect() })
    }

    pub fn uniform(subjects: impl IntoIterator<Item = u32>, count: usize) -> Self {
        Self { per_subject_counts: subjects.into_iter().map(|s| (s, count)).collect() }
    }

    /// Subjects with a non-zero count.
    pub fn active_subjects(&self) -> Vec<u32> {
        self.per_subject_counts.iter().filter(|(_, &c)| c > 0).map(|(&s, _)| s).collect()
    }
}

impl Corpus {
    pub fn new(records: Vec<UtteranceRecord>, keywords: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::NoRecords);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.path.clone()) {
                return Err(Error::DuplicatePath(r.path.clone()));
            }
            if r.keyword_id >= keywords.len() {
                return Err(Error::Invalid(format!("keyword id {} out of range", r.keyword_id)));
            }
            if r.subject_id == 0 {
                return Err(Error::Invalid("subject ids start at 1".into()));
            }
        }
        let mut records = records;
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let subjects = records.iter().map(|r| r.subject_id).collect();
        Ok(Self { records, subjects, keywords })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keyword_id(&self, name: &str) -> Option<usize> {
        self.keywords.iter().position(|k| k == name)
    }

    /// Record indices grouped by (subject, keyword), each group in record order.
    pub fn cells(&self) -> BTreeMap<(u32, usize), Vec<usize>> {
        let mut m: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            m.entry((r.subject_id, r.keyword_id)).or_default().push(i);
        }
        m
    }

    pub fn cell_count(&self, subject: u32, keyword: usize) -> usize {
        self.records.iter().filter(|r| r.subject_id == subject && r.keyword_id == keyword).count()
    }

    /// Records in `split`, optionally restricted to `subjects`.
    pub fn select(&self, split: Split, subjects: Option<&[u32]>) -> Vec<UtteranceRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && subjects.is_none_or(|s| s.contains(&r.subject_id)))
            .cloned()
            .collect()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest_string()).at(path)
    }

    /// `path<TAB>subject<TAB>keyword<TAB>split` lines in record order.
    pub fn manifest_string(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.subject_id,
                self.keywords[r.keyword_id],
                r.split
            ));
        }
        s
    }

    /// Reads a manifest; relative paths resolve against the manifest's directory.
    pub fn read_manifest(path: &Path, keyword_list: &[&str]) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let keywords: Vec<String> = keyword_list.iter().map(|s| s.to_string()).collect();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err(Error::Manifest { line: i + 1, reason: "expected at least 3 fields".into() });
            }
            let mut p = PathBuf::from(fields[0]);
            if p.is_relative() {
                p = base.join(p);
            }
            let subject_id = fields[1]
                .parse()
                .map_err(|_| Error::Manifest { line: i + 1, reason: format!("bad subject `{}`", fields[1]) })?;
            let keyword_id = keywords
                .iter()
                .position(|k| k == fields[2])
                .ok_or_else(|| Error::UnknownKeyword(fields[2].to_string()))?;
            let split = fields.get(3).map(|s| s.parse()).transpose()?.unwrap_or(Split::Unassigned);
            records.push(UtteranceRecord { path: p, subject_id, keyword_id, split });
        }
        Self::new(records, keywords)
    }
}

/// Discovers `<root>/<subject>/<keyword>/<clip>` files, or loads `<root>/manifest.tsv`
/// when present. Subject directories may be plain integers or `sub<N>`.
pub fn scan_corpus(root: &Path, keyword_list: &[&str]) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        });
    }
    let manifest = root.join("manifest.tsv");
    if manifest.is_file() {
        let mut c = Corpus::read_manifest(&manifest, keyword_list)?;
        for r in &mut c.records {
            r.split = Split::Unassigned;
        }
        return Ok(c);
    }
    let keywords: Vec<String> = keyword_list.iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    for subj in sorted_entries(root)? {
        if !subj.is_dir() {
            continue;
        }
        let name = subj.file_name().unwrap_or_default().to_string_lossy().to_string();
        let Some(subject_id) = parse_subject(&name) else {
            continue;
        };
        for kw in sorted_entries(&subj)? {
            if !kw.is_dir() {
                continue;
            }
            let kname = kw.file_name().unwrap_or_default().to_string_lossy().to_string();
            let keyword_id =
                keywords.iter().position(|k| *k == kname).ok_or_else(|| Error::UnknownKeyword(kname.clone()))?;
            for clip in sorted_entries(&kw)? {
                if clip.is_file() {
                    records.push(UtteranceRecord { path: clip, subject_id, keyword_id, split: Split::Unassigned });
                }
            }
        }
    }
    Corpus::new(records, keywords)
}

fn parse_subject(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("sub").unwrap_or(name);
    digits.parse().ok().filter(|&v| v > 0)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).at(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}

/// Train/val/test counts for a cell of `n` records.
///
/// Start from the floor of each held-out share with the remainder in train,
/// then move records out of train while any split is more than one record away
/// from its exact share.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let (rt, rv, rs) = ratios;
    let mut val = (n as f64 * rv + 1e-9).floor() as usize;
    let mut test = (n as f64 * rs + 1e-9).floor() as usize;
    let mut train = n - val - test;
    let over = |c: usize, r: f64| c as f64 - n as f64 * r;
    while over(train, rt) > 1.0 + 1e-9 {
        let dv = n as f64 * rv - val as f64;
        let ds = n as f64 * rs - test as f64;
        if dv >= ds {
            val += 1;
        } else {
            test += 1;
        }
        train -= 1;
    }
    (train, val, test)
}

/// Shuffles every (subject, keyword) cell with `seed` and tags its records.
pub fn split_stratified(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<Corpus> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut out = corpus.clone();
    for ((subject, keyword), mut idx) in corpus.cells() {
        if idx.len() < MIN_CELL {
            return Err(Error::CellTooSmall {
                subject,
                keyword: corpus.keywords[keyword].clone(),
                count: idx.len(),
                min: MIN_CELL,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, subject, keyword));
        idx.shuffle(&mut rng);
        let (nt, nv, _) = split_counts(idx.len(), ratios);
        for (k, &i) in idx.iter().enumerate() {
            out.records[i].split = if k < nt {
                Split::Train
            } else if k < nt + nv {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

fn cell_seed(seed: u64, subject: u32, keyword: usize) -> u64 {
    seed ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (keyword as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Seeded subset of `source_split` with exactly the planned count per keyword for each subject.
pub fn apply_plan(corpus: &Corpus, plan: &SamplePlan, source_split: Split, seed: u64) -> Result<Vec<UtteranceRecord>> {
    let cells = corpus.cells();
    let mut out = Vec::new();
    for (&subject, &count) in &plan.per_subject_counts {
        if count == 0 {
            continue;
        }
        if !corpus.subjects.contains(&subject) {
            return Err(Error::UnknownSubject(subject));
        }
        for k in 0..corpus.keywords.len() {
            let mut pool: Vec<usize> = cells
                .get(&(subject, k))
                .map(|v| v.iter().copied().filter(|&i| corpus.records[i].split == source_split).collect())
                .unwrap_or_default();
            if pool.len() < count {
                return Err(Error::Unsatisfiable {
                    subject,
                    keyword: corpus.keywords[k].clone(),
                    requested: count,
                    available: pool.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed.wrapping_add(0x5151), subject, k));
            pool.shuffle(&mut rng);
            pool.truncate(count);
            pool.sort_unstable();
            out.extend(pool.into_iter().map(|i| corpus.records[i].clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(subjects: u32, per_cell: usize) -> Corpus {
        let mut recs = Vec::new();
        for s in 1..=subjects {
            for k in 0..10 {
                for c in 0..per_cell {
                    recs.push(UtteranceRecord {
                        path: PathBuf::from(format!("/c/{s}/{k}/{c:03}.wav")),
                        subject_id: s,
                        keyword_id: k,
                        split: Split::Unassigned,
                    });
                }
            }
        }
        Corpus::new(recs, INSPECTION_KEYWORDS.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    /// Among all (train, val, test) summing to n that respect the per-split
    /// tolerance, the one with the most training records, then most val.
    fn enumerate_counts(n: usize, r: (f64, f64, f64)) -> (usize, usize, usize) {
        let mut best = None;
        for t in 0..=n {
            for v in 0..=n - t {
                let s = n - t - v;
                let ok = [(t, r.0), (v, r.1), (s, r.2)]
                    .iter()
                    .all(|&(c, q)| (c as f64 / n as f64 - q).abs() <= 1.0 / n as f64 + 1e-12);
                let floors_ok = v >= (n as f64 * r.1 + 1e-9).floor() as usize
                    && s >= (n as f64 * r.2 + 1e-9).floor() as usize;
                if ok && floors_ok {
                    let cand = (t, v, s);
                    best = match best {
                        None => Some(cand),
                        Some(b) if (cand.0, cand.1) > (b.0, b.1) => Some(cand),
                        keep => keep,
                    };
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn split_counts_match_enumeration() {
        assert_eq!(split_counts(50, (0.6, 0.2, 0.2)), (30, 10, 10));
        assert_eq!(split_counts(5, (0.6, 0.2, 0.2)), (3, 1, 1));
        for n in MIN_CELL..=120 {
            assert_eq!(split_counts(n, (0.6, 0.2, 0.2)), enumerate_counts(n, (0.6, 0.2, 0.2)), "n = {n}");
        }
    }

    #[test]
    fn stratified_split_is_deterministic_and_disjoint() {
        let c = fake(2, 50);
        let a = split_stratified(&c, (0.6, 0.2, 0.2), 7).unwrap();
        let b = split_stratified(&c, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(a.manifest_string(), b.manifest_string());
        let d = split_stratified(&c, (0.6, 0.2, 0.2), 8).unwrap();
        assert_ne!(a.manifest_string(), d.manifest_string());
        for (_, idx) in a.cells() {
            let n = |s| idx.iter().filter(|&&i| a.records[i].split == s).count();
            assert_eq!((n(Split::Train), n(Split::Val), n(Split::Test)), (30, 10, 10));
        }
    }

    #[test]
    fn small_cell_is_rejected_by_name() {
        let c = fake(1, 4);
        match split_stratified(&c, (0.6, 0.2, 0.2), 0) {
            Err(Error::CellTooSmall { subject: 1, count: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plans_select_exact_counts() {
        let c = split_stratified(&fake(5, 50), (0.6, 0.2, 0.2), 1).unwrap();
        let plan = SamplePlan::from_counts(&[1, 2, 3, 4, 5], &[20, 30, 20, 20, 20]).unwrap();
        assert_eq!(apply_plan(&c, &plan, Split::Train, 3).unwrap().len(), 1100);
        let solo = SamplePlan::from_counts(&[1, 2, 3, 4, 5], &[10, 0, 0, 0, 0]).unwrap();
        let v = apply_plan(&c, &solo, Split::Train, 3).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v.iter().all(|r| r.subject_id == 1));
        let too_many = SamplePlan::uniform([1], 40);
        assert!(matches!(
            apply_plan(&c, &too_many, Split::Train, 3),
            Err(Error::Unsatisfiable { requested: 40, available: 30, .. })
        ));
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let r = UtteranceRecord { path: "/a.wav".into(), subject_id: 1, keyword_id: 0, split: Split::Unassigned };
        let err = Corpus::new(vec![r.clone(), r], vec!["x".into()]).unwrap_err();
        assert!(matches!(err, Error::DuplicatePath(_)));
    }

    #[test]
    fn scan_reads_layout_and_rejects_strangers() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_corpus(dir.path(), &INSPECTION_KEYWORDS), Err(Error::NoRecords)));
        for s in ["1", "2"] {
            for k in ["Stop", "Hover"] {
                let d = dir.path().join(s).join(k);
                fs::create_dir_all(&d).unwrap();
                fs::write(d.join("b.wav"), b"").unwrap();
                fs::write(d.join("a.wav"), b"").unwrap();
            }
        }
        let c = scan_corpus(dir.path(), &INSPECTION_KEYWORDS).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.records.windows(2).all(|w| w[0].path < w[1].path));
        assert_eq!(c.subjects.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
        fs::create_dir_all(dir.path().join("1").join("Jump")).unwrap();
        match scan_corpus(dir.path(), &INSPECTION_KEYWORDS) {
            Err(Error::UnknownKeyword(k)) => assert_eq!(k, "Jump"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = split_stratified(&fake(2, 6), (0.6, 0.2, 0.2), 4).unwrap();
        let p = dir.path().join("m.tsv");
        c.write_manifest(&p).unwrap();
        let back = Corpus::read_manifest(&p, &INSPECTION_KEYWORDS).unwrap();
        assert_eq!(back, c);
    }
}
