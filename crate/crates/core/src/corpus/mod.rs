//! Unlabeled corpora, labeled scoring tasks, and the synthetic benchmark.

mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use synthetic::{
    count_categories, generate_benchmark, oracle_label, Benchmark, ConceptCategory, Lexicon,
    SyntheticBenchmarkSpec,
};

/// Which register a corpus stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    General,
    InDomain,
    OffDomain,
    /// General and domain text pooled together.
    Mixed,
}

impl DomainTag {
    pub const ALL: [DomainTag; 4] = [
        DomainTag::General,
        DomainTag::InDomain,
        DomainTag::OffDomain,
        DomainTag::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::General => "general",
            DomainTag::InDomain => "in_domain",
            DomainTag::OffDomain => "off_domain",
            DomainTag::Mixed => "mixed",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown domain tag {s:?} (expected general, in_domain, off_domain or mixed)"
                ))
            })
    }
}

/// A named, tagged collection of documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    id: String,
    documents: Vec<String>,
    tag: DomainTag,
}

impl Corpus {
    /// Drops blank documents; errors if nothing is left.
    pub fn new(id: impl Into<String>, documents: Vec<String>, tag: DomainTag) -> Result<Self> {
        let id = id.into();
        let documents: Vec<String> = documents
            .into_iter()
            .filter(|d| !d.trim().is_empty())
            .collect();
        if documents.is_empty() {
            return Err(Error::Input(format!("corpus {id:?} has no documents")));
        }
        Ok(Corpus { id, documents, tag })
    }

    /// Splits `text` into documents on blank lines.
    pub fn parse(id: impl Into<String>, text: &str, tag: DomainTag) -> Result<Self> {
        let text = text.replace("\r\n", "\n");
        let mut docs = Vec::new();
        let mut cur: Vec<&str> = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !cur.is_empty() {
                    docs.push(cur.join("\n"));
                    cur.clear();
                }
            } else {
                cur.push(line);
            }
        }
        if !cur.is_empty() {
            docs.push(cur.join("\n"));
        }
        Self::new(id, docs, tag)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Documents joined by blank lines, the on-disk format.
    pub fn to_text(&self) -> String {
        let mut s = self.documents.join("\n\n");
        s.push('\n');
        s
    }
}

/// Reads a corpus file; the corpus id is the file stem.
pub fn load_corpus(path: &Path, tag: DomainTag) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Corpus::parse(id, &text, tag).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringTask {
    pub task_id: String,
    pub examples: Vec<LabeledExample>,
    pub n_classes: usize,
    /// `label_mapping[dense] = original label`.
    pub label_mapping: Vec<i64>,
    pub provenance: String,
    /// Problems found while loading that did not stop it.
    pub warnings: Vec<String>,
}

impl ScoringTask {
    /// Builds a task whose labels are already dense.
    pub fn new(task_id: impl Into<String>, examples: Vec<LabeledExample>, n_classes: usize) -> Result<Self> {
        let task_id = task_id.into();
        if let Some((i, e)) = examples.iter().enumerate().find(|(_, e)| e.label >= n_classes) {
            return Err(Error::Data {
                path: None,
                line: None,
                message: format!(
                    "task {task_id}: example {i} has label {} outside 0..{n_classes}",
                    e.label
                ),
            });
        }
        Ok(ScoringTask {
            task_id,
            examples,
            n_classes,
            label_mapping: (0..n_classes as i64).collect(),
            provenance: String::new(),
            warnings: Vec::new(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Tab-separated form with a `task_id response label` header, original
    /// labels restored through the mapping.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("task_id\tresponse\tlabel\n");
        for e in &self.examples {
            let label = self.label_mapping.get(e.label).copied().unwrap_or(e.label as i64);
            s.push_str(&format!("{}\t{}\t{label}\n", self.task_id, e.text));
        }
        s
    }
}

struct RawRow {
    task_id: String,
    text: String,
    label: i64,
}

fn read_rows(text: &str, path: Option<&Path>) -> Result<Vec<RawRow>> {
    let err = |line: Option<usize>, message: String| Error::Data {
        path: path.map(Path::to_path_buf),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| err(Some(1), e.to_string()))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| err(Some(1), format!("missing column {name:?}")))
    };
    let (c_task, c_resp, c_label) = (col("task_id")?, col("response")?, col("label")?);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(None, e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let raw = rec[c_label].trim();
        let label: i64 = raw
            .parse()
            .map_err(|_| err(line, format!("label {raw:?} is not an integer")))?;
        rows.push(RawRow {
            task_id: rec[c_task].trim().to_string(),
            text: rec[c_resp].to_string(),
            label,
        });
    }
    Ok(rows)
}

fn densify(task_id: String, rows: Vec<RawRow>, provenance: String) -> ScoringTask {
    let mapping: Vec<i64> = {
        let mut l: Vec<i64> = rows.iter().map(|r| r.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let dense: HashMap<i64, usize> = mapping.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut seen: HashMap<&str, i64> = HashMap::new();
    let mut warnings = Vec::new();
    for r in &rows {
        if let Some(&prev) = seen.get(r.text.as_str()) {
            if prev != r.label {
                let w = format!(
                    "task {task_id}: response {:?} appears with labels {prev} and {}; keeping both",
                    r.text, r.label
                );
                log::warn!("{w}");
                warnings.push(w);
            }
        } else {
            seen.insert(&r.text, r.label);
        }
    }
    let examples = rows
        .iter()
        .map(|r| LabeledExample {
            text: r.text.clone(),
            label: dense[&r.label],
        })
        .collect();
    ScoringTask {
        task_id,
        examples,
        n_classes: mapping.len(),
        label_mapping: mapping,
        provenance,
        warnings,
    }
}

/// Parses every task in a tab-separated scoring file, in order of first
/// appearance.
pub fn parse_scoring_tasks(text: &str, path: Option<&Path>) -> Result<Vec<ScoringTask>> {
    let rows = read_rows(text, path)?;
    if rows.is_empty() {
        return Err(Error::Data {
            path: path.map(Path::to_path_buf),
            line: None,
            message: "no examples".into(),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(&r.task_id) {
            order.push(r.task_id.clone());
        }
        groups.entry(r.task_id.clone()).or_default().push(r);
    }
    let provenance = path
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "inline".into());
    Ok(order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(&id).unwrap_or_default();
            densify(id, rows, provenance.clone())
        })
        .collect())
}

/// Loads a single-task scoring file.
pub fn load_scoring_task(path: &Path) -> Result<ScoringTask> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = parse_scoring_tasks(&text, Some(path))?;
    if tasks.len() != 1 {
        let ids: Vec<_> = tasks.iter().map(|t| t.task_id.as_str()).collect();
        return Err(Error::Data {
            path: Some(path.to_path_buf()),
            line: None,
            message: format!("expected one task id, found {ids:?}"),
        });
    }
    Ok(tasks.remove(0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Largest-remainder apportionment of `n` by `ratios`.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Stratified train/dev/test split. Split sizes follow `ratios` by
/// largest remainder; every split receives every class.
pub fn split(task: &ScoringTask, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let n_classes = task.n_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, e) in task.examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::data(format!(
                "task {}: class {c} has {} example(s), too few to stratify into 3 splits",
                task.task_id,
                members.len()
            )));
        }
    }
    // Per-class floors (at least one per split), then leftovers go one at a
    // time to the (class, split) cell with the largest remainder among
    // splits still short of their overall largest-remainder total.
    let totals = apportion(task.examples.len(), &ratios);
    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(n_classes);
    let mut frac: Vec<[f64; 3]> = Vec::with_capacity(n_classes);
    for members in &by_class {
        let n = members.len() as f64;
        let mut a = [0usize; 3];
        let mut f = [0.0; 3];
        for s in 0..3 {
            let x = n * ratios[s];
            a[s] = (x.floor() as usize).max(1);
            f[s] = x - x.floor();
        }
        while a.iter().sum::<usize>() > members.len() {
            let s = (0..3).max_by_key(|&s| a[s]).expect("three splits");
            a[s] -= 1;
        }
        alloc.push(a);
        frac.push(f);
    }
    let mut need: Vec<isize> = (0..3)
        .map(|s| totals[s] as isize - alloc.iter().map(|a| a[s] as isize).sum::<isize>())
        .collect();
    let mut spare: Vec<usize> = by_class
        .iter()
        .zip(&alloc)
        .map(|(m, a)| m.len() - a.iter().sum::<usize>())
        .collect();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for c in 0..n_classes {
            if spare[c] == 0 {
                continue;
            }
            for s in 0..3 {
                if need[s] > 0 && best.is_none_or(|(bc, bs)| frac[c][s] > frac[bc][bs]) {
                    best = Some((c, s));
                }
            }
        }
        let Some((c, s)) = best else { break };
        alloc[c][s] += 1;
        frac[c][s] -= 1.0;
        spare[c] -= 1;
        need[s] -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (members, a) in by_class.iter().zip(&alloc) {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let mut it = m.into_iter();
        for s in 0..3 {
            parts[s].extend(it.by_ref().take(a[s]));
        }
    }
    let take = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        idx.iter().map(|&i| task.examples[i].clone()).collect::<Vec<_>>()
    };
    let [mut tr, mut dv, mut te] = parts;
    Ok(Split {
        train: take(&mut tr),
        dev: take(&mut dv),
        test: take(&mut te),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_hits_totals() {
        assert_eq!(apportion(100, &[0.8, 0.1, 0.1]), vec![80, 10, 10]);
        assert_eq!(apportion(7, &[0.5, 0.25, 0.25]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn domain_tag_round_trip() {
        for t in DomainTag::ALL {
            assert_eq!(t.as_str().parse::<DomainTag>().unwrap(), t);
            assert_eq!(DomainTag::from_code(t.code()), Some(t));
        }
        assert!("journal".parse::<DomainTag>().is_err());
    }
}
