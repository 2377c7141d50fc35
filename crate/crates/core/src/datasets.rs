//! Interaction logs: ingestion of raw exports, the canonical CSV format,
//! synthetic data, student-level folds and fixed-length windows.
//!
//! Canonical CSV: header `student_id,order,question_id,kc_ids,answer`, one
//! interaction per row, `kc_ids` `|`-separated dense integers, LF endings.
//! Every downstream stage reads only this format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TgmnError};

pub const CANONICAL_HEADER: &str = "student_id,order,question_id,kc_ids,answer";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub question: usize,
    pub answer: u8,
    pub order: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentLog {
    pub student_id: u64,
    pub interactions: Vec<Interaction>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonicalDataset {
    pub students: Vec<StudentLog>,
    /// Sorted, de-duplicated KC ids of each question.
    pub question_kcs: Vec<Vec<usize>>,
    pub num_questions: usize,
    pub num_kcs: usize,
}

impl CanonicalDataset {
    /// Checks the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        if self.question_kcs.len() != self.num_questions {
            return Err(TgmnError::Argument(format!(
                "question_kcs has {} entries for {} questions",
                self.question_kcs.len(),
                self.num_questions
            )));
        }
        if self.num_questions == 0 || self.num_kcs == 0 {
            return Err(TgmnError::Argument("dataset has no questions or no KCs".into()));
        }
        for (q, kcs) in self.question_kcs.iter().enumerate() {
            if kcs.is_empty() {
                return Err(TgmnError::Argument(format!("question {q} has no KCs")));
            }
            if kcs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(TgmnError::Argument(format!("KC list of question {q} is not sorted and unique")));
            }
            if let Some(&k) = kcs.iter().find(|&&k| k >= self.num_kcs) {
                return Err(TgmnError::Argument(format!("question {q} references KC {k} >= {}", self.num_kcs)));
            }
        }
        let mut seen = BTreeSet::new();
        for log in &self.students {
            if !seen.insert(log.student_id) {
                return Err(TgmnError::Argument(format!("student {} appears twice", log.student_id)));
            }
            if log.interactions.is_empty() {
                return Err(TgmnError::Argument(format!("student {} has an empty log", log.student_id)));
            }
            for pair in log.interactions.windows(2) {
                if pair[0].order >= pair[1].order {
                    return Err(TgmnError::Argument(format!(
                        "student {} log is not strictly ordered",
                        log.student_id
                    )));
                }
            }
            for it in &log.interactions {
                if it.question >= self.num_questions {
                    return Err(TgmnError::UnknownQuestion(it.question));
                }
                if it.answer > 1 {
                    return Err(TgmnError::Argument(format!("answer {} is not binary", it.answer)));
                }
            }
        }
        Ok(())
    }

    pub fn num_interactions(&self) -> usize {
        self.students.iter().map(|s| s.interactions.len()).sum()
    }

    pub fn student(&self, id: u64) -> Option<&StudentLog> {
        self.students.iter().find(|s| s.student_id == id)
    }

    pub fn correct_rate(&self) -> f64 {
        let correct: usize = self
            .students
            .iter()
            .flat_map(|s| s.interactions.iter())
            .map(|i| i.answer as usize)
            .sum();
        correct as f64 / self.num_interactions().max(1) as f64
    }

    /// Renders the canonical CSV.
    pub fn to_canonical_csv(&self) -> String {
        let mut out = String::with_capacity(self.num_interactions() * 16 + 64);
        out.push_str(CANONICAL_HEADER);
        out.push('\n');
        for log in &self.students {
            for it in &log.interactions {
                let kcs = self.question_kcs[it.question]
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("|");
                writeln!(out, "{},{},{},{},{}", log.student_id, it.order, it.question, kcs, it.answer).unwrap();
            }
        }
        out
    }

    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_canonical_csv()).map_err(|e| TgmnError::io(path, e))
    }

    pub fn load_canonical(path: &Path) -> Result<CanonicalDataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| TgmnError::format(path, 1, e.to_string()))?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != CANONICAL_HEADER {
            return Err(TgmnError::format(
                path,
                1,
                format!("expected header `{CANONICAL_HEADER}`, found `{}`", header.join(",")),
            ));
        }
        let mut students: Vec<StudentLog> = Vec::new();
        let mut position: HashMap<u64, usize> = HashMap::new();
        let mut kc_map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| TgmnError::format(path, line, e.to_string()))?;
            if record.len() != 5 {
                return Err(TgmnError::format(path, line, format!("expected 5 fields, found {}", record.len())));
            }
            let field = |k: usize, name: &str| -> Result<u64> {
                record[k]
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| TgmnError::format(path, line, format!("bad {name} `{}`", &record[k])))
            };
            let student_id = field(0, "student_id")?;
            let order = field(1, "order")?;
            let question = field(2, "question_id")? as usize;
            let answer = field(4, "answer")?;
            if answer > 1 {
                return Err(TgmnError::format(path, line, format!("answer `{answer}` is not 0 or 1")));
            }
            let mut kcs = Vec::new();
            for tok in record[3].split('|') {
                let k = tok
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| TgmnError::format(path, line, format!("bad kc id `{tok}`")))?;
                kcs.push(k);
            }
            kcs.sort_unstable();
            kcs.dedup();
            match kc_map.get(&question) {
                Some(existing) if *existing != kcs => {
                    return Err(TgmnError::format(
                        path,
                        line,
                        format!("question {question} has inconsistent KC sets"),
                    ))
                }
                Some(_) => {}
                None => {
                    kc_map.insert(question, kcs);
                }
            }
            let slot = *position.entry(student_id).or_insert_with(|| {
                students.push(StudentLog {
                    student_id,
                    interactions: Vec::new(),
                });
                students.len() - 1
            });
            let log = &mut students[slot];
            if let Some(last) = log.interactions.last() {
                if last.order >= order {
                    return Err(TgmnError::format(
                        path,
                        line,
                        format!("student {student_id} order {order} does not increase"),
                    ));
                }
            }
            log.interactions.push(Interaction {
                question,
                answer: answer as u8,
                order,
            });
        }
        let num_questions = kc_map.keys().next_back().map_or(0, |&q| q + 1);
        if kc_map.len() != num_questions {
            return Err(TgmnError::format(path, 0, "question ids are not dense"));
        }
        let question_kcs: Vec<Vec<usize>> = kc_map.into_values().collect();
        let used: BTreeSet<usize> = question_kcs.iter().flatten().copied().collect();
        let num_kcs = used.iter().next_back().map_or(0, |&k| k + 1);
        if used.len() != num_kcs {
            return Err(TgmnError::format(path, 0, "KC ids are not dense"));
        }
        let dataset = CanonicalDataset {
            students,
            question_kcs,
            num_questions,
            num_kcs,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

/// Column mapping for a raw interaction export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvSchema {
    pub student: String,
    pub question: String,
    /// Column holding one or more KC labels.
    pub kcs: String,
    pub answer: String,
    /// Ordering column (order id or timestamp). Row order is used when absent.
    #[serde(default)]
    pub order: Option<String>,
    /// Separator between KC labels inside the KC column.
    #[serde(default = "default_kc_separator")]
    pub kc_separator: String,
    /// Merge consecutive rows of one student sharing an order value and
    /// question into one interaction with the union of their KCs (exports
    /// that emit one row per skill of a multi-skill question).
    #[serde(default)]
    pub merge_same_order: bool,
}

fn default_kc_separator() -> String {
    "_".to_string()
}

impl CsvSchema {
    pub fn new(student: &str, question: &str, kcs: &str, answer: &str) -> Self {
        CsvSchema {
            student: student.into(),
            question: question.into(),
            kcs: kcs.into(),
            answer: answer.into(),
            order: None,
            kc_separator: default_kc_separator(),
            merge_same_order: false,
        }
    }
}

/// Original label to dense id, per entity kind.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub students: BTreeMap<String, u64>,
    pub questions: BTreeMap<String, usize>,
    pub kcs: BTreeMap<String, usize>,
}

impl IdMap {
    /// `<dir>/<stem>.idmap.json` next to a canonical CSV.
    pub fn sidecar_path(canonical: &Path) -> PathBuf {
        let stem = canonical.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        canonical.with_file_name(format!("{stem}.idmap.json"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| TgmnError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<IdMap> {
        let text = fs::read_to_string(path).map_err(|e| TgmnError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub rejected_answer: usize,
    pub rejected_no_kc: usize,
    pub merged: usize,
}

impl IngestReport {
    pub fn rejected(&self) -> usize {
        self.rejected_answer + self.rejected_no_kc
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: CanonicalDataset,
    pub id_map: IdMap,
    pub report: IngestReport,
}

fn coerce_answer(raw: &str) -> Option<u8> {
    let t = raw.trim();
    match t.to_ascii_lowercase().as_str() {
        "true" => return Some(1),
        "false" => return Some(0),
        _ => {}
    }
    match t.parse::<f64>() {
        Ok(v) if v == 0.0 => Some(0),
        Ok(v) if v == 1.0 => Some(1),
        _ => None,
    }
}

struct RawRow {
    row: usize,
    student: String,
    question: String,
    kcs: Vec<String>,
    answer: u8,
    order: Option<String>,
}

/// Reads a raw export into the canonical representation.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| TgmnError::io(path, std::io::Error::other(e.to_string())))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TgmnError::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let student_col = column(&schema.student)?;
    let question_col = column(&schema.question)?;
    let kc_col = column(&schema.kcs)?;
    let answer_col = column(&schema.answer)?;
    let order_col = schema.order.as_deref().map(column).transpose()?;

    let mut report = IngestReport::default();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        report.rows_read += 1;
        let get = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let Some(answer) = coerce_answer(&get(answer_col)) else {
            report.rejected_answer += 1;
            continue;
        };
        let kcs: Vec<String> = get(kc_col)
            .split(schema.kc_separator.as_str())
            .map(|k| k.trim().to_string())
            .filter(|k| !k.is_empty())
            .collect();
        if kcs.is_empty() {
            report.rejected_no_kc += 1;
            continue;
        }
        rows.push(RawRow {
            row: i,
            student: get(student_col),
            question: get(question_col),
            kcs,
            answer,
            order: order_col.map(get),
        });
    }
    if report.rejected() > 0 {
        warn!(
            "{}: rejected {} rows ({} non-binary answers, {} without KCs)",
            path.display(),
            report.rejected(),
            report.rejected_answer,
            report.rejected_no_kc
        );
    }

    let mut id_map = IdMap::default();
    let mut question_order: Vec<String> = Vec::new();
    let mut kc_order: Vec<String> = Vec::new();
    let mut student_order: Vec<String> = Vec::new();
    for r in &rows {
        if !id_map.students.contains_key(&r.student) {
            id_map.students.insert(r.student.clone(), student_order.len() as u64);
            student_order.push(r.student.clone());
        }
        if !id_map.questions.contains_key(&r.question) {
            id_map.questions.insert(r.question.clone(), question_order.len());
            question_order.push(r.question.clone());
        }
        for k in &r.kcs {
            if !id_map.kcs.contains_key(k) {
                id_map.kcs.insert(k.clone(), kc_order.len());
                kc_order.push(k.clone());
            }
        }
    }

    let numeric_order = rows
        .iter()
        .all(|r| r.order.as_deref().map_or(true, |o| o.parse::<f64>().is_ok()));
    let mut per_student: Vec<Vec<&RawRow>> = vec![Vec::new(); student_order.len()];
    for r in &rows {
        per_student[id_map.students[&r.student] as usize].push(r);
    }
    let mut question_kcs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); question_order.len()];
    let mut students = Vec::with_capacity(per_student.len());
    for (sid, mut list) in per_student.into_iter().enumerate() {
        if order_col.is_some() {
            list.sort_by(|a, b| {
                let (oa, ob) = (a.order.as_deref().unwrap_or(""), b.order.as_deref().unwrap_or(""));
                let key = if numeric_order {
                    let (x, y) = (oa.parse::<f64>().unwrap(), ob.parse::<f64>().unwrap());
                    x.total_cmp(&y)
                } else {
                    oa.cmp(ob)
                };
                key.then(a.row.cmp(&b.row))
            });
        }
        let mut interactions: Vec<Interaction> = Vec::with_capacity(list.len());
        let mut previous: Option<&RawRow> = None;
        for r in list {
            let q = id_map.questions[&r.question];
            for k in &r.kcs {
                question_kcs[q].insert(id_map.kcs[k]);
            }
            if schema.merge_same_order {
                if let Some(p) = previous {
                    if p.order.is_some() && p.order == r.order && p.question == r.question {
                        report.merged += 1;
                        continue;
                    }
                }
            }
            interactions.push(Interaction {
                question: q,
                answer: r.answer,
                order: interactions.len() as u64,
            });
            previous = Some(r);
        }
        students.push(StudentLog {
            student_id: sid as u64,
            interactions,
        });
    }
    report.rows_kept = rows.len() - report.merged;
    let dataset = CanonicalDataset {
        students,
        question_kcs: question_kcs.into_iter().map(|s| s.into_iter().collect()).collect(),
        num_questions: question_order.len(),
        num_kcs: kc_order.len(),
    };
    dataset.validate()?;
    info!(
        "{}: {} students, {} questions, {} KCs, {} interactions",
        path.display(),
        dataset.students.len(),
        dataset.num_questions,
        dataset.num_kcs,
        dataset.num_interactions()
    );
    Ok(Ingested {
        dataset,
        id_map,
        report,
    })
}

/// Generator constants for synthetic logs (1-parameter IRT with practice gains).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_students: usize,
    pub num_questions: usize,
    pub num_kcs: usize,
    pub seed: u64,
    /// Standard deviation of student ability.
    pub ability_sd: f64,
    /// Standard deviation of question difficulty.
    pub difficulty_sd: f64,
    /// Mastery added to each KC of a question after it is practiced.
    pub mastery_gain: f64,
}

impl SyntheticConfig {
    pub fn new(num_students: usize, num_questions: usize, num_kcs: usize, seed: u64) -> Self {
        SyntheticConfig {
            num_students,
            num_questions,
            num_kcs,
            seed,
            ability_sd: 2.5,
            difficulty_sd: 1.0,
            mastery_gain: 0.1,
        }
    }
}

/// Synthetic logs: every student answers every question once in a random
/// order; `P(correct) = logistic(ability + mean KC mastery - difficulty)`.
pub fn generate_synthetic(num_students: usize, num_questions: usize, num_kcs: usize, seed: u64) -> Result<CanonicalDataset> {
    generate_synthetic_with(&SyntheticConfig::new(num_students, num_questions, num_kcs, seed))
}

pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<CanonicalDataset> {
    let (students, questions, kcs) = (cfg.num_students, cfg.num_questions, cfg.num_kcs);
    if students == 0 || questions == 0 || kcs == 0 {
        return Err(TgmnError::Argument("synthetic counts must all be >= 1".into()));
    }
    if kcs > 3 * questions {
        return Err(TgmnError::Argument(format!(
            "{kcs} KCs cannot all be linked to {questions} questions with at most 3 KCs each"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kc_perm: Vec<usize> = (0..kcs).collect();
    kc_perm.shuffle(&mut rng);
    let mut question_kcs = Vec::with_capacity(questions);
    for q in 0..questions {
        // Questions q, q+L, q+2L of the permuted KC list are forced so that
        // every KC is linked to at least one question.
        let mut set: BTreeSet<usize> = (0..3)
            .map(|r| q + r * questions)
            .filter(|&j| j < kcs)
            .map(|j| kc_perm[j])
            .collect();
        let target = rng.gen_range(1..=3usize).max(set.len()).min(kcs);
        while set.len() < target {
            set.insert(rng.gen_range(0..kcs));
        }
        question_kcs.push(set.into_iter().collect::<Vec<_>>());
    }
    let difficulty_dist = Normal::new(0.0, cfg.difficulty_sd).map_err(|e| TgmnError::Argument(e.to_string()))?;
    let ability_dist = Normal::new(0.0, cfg.ability_sd).map_err(|e| TgmnError::Argument(e.to_string()))?;
    let difficulty: Vec<f64> = (0..questions).map(|_| difficulty_dist.sample(&mut rng)).collect();
    let mut logs = Vec::with_capacity(students);
    for s in 0..students {
        let ability = ability_dist.sample(&mut rng);
        let mut mastery = vec![0.0; kcs];
        let mut order: Vec<usize> = (0..questions).collect();
        order.shuffle(&mut rng);
        let interactions = order
            .into_iter()
            .enumerate()
            .map(|(t, q)| {
                let qk = &question_kcs[q];
                let m = qk.iter().map(|&k| mastery[k]).sum::<f64>() / qk.len() as f64;
                let p = 1.0 / (1.0 + (-(ability + m - difficulty[q])).exp());
                let answer = u8::from(rng.gen::<f64>() < p);
                for &k in qk {
                    mastery[k] += cfg.mastery_gain;
                }
                Interaction {
                    question: q,
                    answer,
                    order: t as u64,
                }
            })
            .collect();
        logs.push(StudentLog {
            student_id: s as u64,
            interactions,
        });
    }
    let dataset = CanonicalDataset {
        students: logs,
        question_kcs,
        num_questions: questions,
        num_kcs: kcs,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Student-level assignment to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<u64, usize>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn test_students(&self, fold: usize) -> Vec<u64> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn train_students(&self, fold: usize) -> Vec<u64> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Training students of `fold` split into `(train, validation)`, holding
    /// out `fraction` of them (at least one) for model selection.
    pub fn train_validation(&self, fold: usize, fraction: f64) -> (Vec<u64>, Vec<u64>) {
        let mut train = self.train_students(fold);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold as u64 + 1)));
        train.shuffle(&mut rng);
        let held = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len().saturating_sub(1).max(1));
        let validation: Vec<u64> = {
            let mut v = train.split_off(train.len() - held);
            v.sort_unstable();
            v
        };
        train.sort_unstable();
        (train, validation)
    }
}

pub fn make_folds(dataset: &CanonicalDataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(TgmnError::Argument(format!("fold count must be >= 2, got {k}")));
    }
    if k > dataset.students.len() {
        return Err(TgmnError::Argument(format!(
            "{k} folds requested for {} students",
            dataset.students.len()
        )));
    }
    let mut ids: Vec<u64> = dataset.students.iter().map(|s| s.student_id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect();
    Ok(FoldSplit { k, assignments, seed })
}

/// A contiguous segment of at most `S` interactions of one student.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub student_id: u64,
    pub window_index: usize,
    /// `(question_id, answer)` pairs.
    pub interactions: Vec<(usize, u8)>,
}

/// Tiles every student log into windows of length `window` (last may be short).
pub fn window_sequences(dataset: &CanonicalDataset, window: usize) -> Result<Vec<Window>> {
    if window == 0 {
        return Err(TgmnError::Argument("window length must be >= 1".into()));
    }
    Ok(dataset.students.iter().flat_map(|log| windows_of(log, window)).collect())
}

pub fn windows_of(log: &StudentLog, window: usize) -> Vec<Window> {
    log.interactions
        .chunks(window)
        .enumerate()
        .map(|(i, chunk)| Window {
            student_id: log.student_id,
            window_index: i,
            interactions: chunk.iter().map(|it| (it.question, it.answer)).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn toy_schema() -> CsvSchema {
        CsvSchema::new("user", "item", "skills", "correct")
    }

    #[test]
    fn ingest_three_rows_one_student() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "raw.csv", "user,item,skills,correct\nu1,q7,s3,1\nu1,q9,s3,0\nu1,q7,s3,1\n");
        let out = ingest_csv(&p, &toy_schema()).unwrap();
        assert_eq!(out.dataset.num_questions, 2);
        assert_eq!(out.dataset.num_kcs, 1);
        assert_eq!(out.dataset.students.len(), 1);
        assert_eq!(out.dataset.students[0].interactions.len(), 3);
        assert_eq!(out.id_map.questions["q9"], 1);
        assert_eq!(out.report.rejected(), 0);
    }

    #[test]
    fn ingest_rejects_non_binary_answers_and_missing_kcs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "raw.csv",
            "user,item,skills,correct\nu1,q1,a_b,1\nu1,q2,a,2\nu2,q2,,0\nu2,q1,b,0.0\n",
        );
        let out = ingest_csv(&p, &toy_schema()).unwrap();
        assert_eq!(out.report.rejected_answer, 1);
        assert_eq!(out.report.rejected_no_kc, 1);
        assert_eq!(out.report.rows_read, out.dataset.num_interactions() + out.report.rejected());
        assert_eq!(out.dataset.question_kcs[0], vec![0, 1]);
    }

    #[test]
    fn ingest_missing_column_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "raw.csv", "user,item,correct\nu1,q1,1\n");
        assert!(matches!(ingest_csv(&p, &toy_schema()), Err(TgmnError::Schema(_))));
    }

    #[test]
    fn ingest_sorts_by_order_column_stably() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "raw.csv",
            "user,item,skills,correct,ts\nu1,q1,a,1,30\nu1,q2,a,0,10\nu1,q3,a,1,10\n",
        );
        let mut schema = toy_schema();
        schema.order = Some("ts".into());
        let out = ingest_csv(&p, &schema).unwrap();
        let qs: Vec<usize> = out.dataset.students[0].interactions.iter().map(|i| i.question).collect();
        // q1 -> 0, q2 -> 1, q3 -> 2 by first appearance; sorted by ts then row.
        assert_eq!(qs, vec![1, 2, 0]);
    }

    #[test]
    fn ingest_merges_multi_skill_rows_when_asked() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "raw.csv",
            "user,item,skills,correct,order_id\nu1,q1,a,1,5\nu1,q1,b,1,5\nu1,q2,b,0,6\n",
        );
        let mut schema = toy_schema();
        schema.order = Some("order_id".into());
        schema.merge_same_order = true;
        let out = ingest_csv(&p, &schema).unwrap();
        assert_eq!(out.dataset.students[0].interactions.len(), 2);
        assert_eq!(out.dataset.question_kcs[0], vec![0, 1]);
        assert_eq!(out.report.merged, 1);
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let d = generate_synthetic(40, 50, 5, 1).unwrap();
        assert_eq!(d.students.len(), 40);
        assert_eq!(d.num_questions, 50);
        assert_eq!(d.num_kcs, 5);
        assert_eq!(d.num_interactions(), 40 * 50);
        assert!(d.question_kcs.iter().all(|k| (1..=3).contains(&k.len())));
        let again = generate_synthetic(40, 50, 5, 1).unwrap();
        assert_eq!(d.to_canonical_csv(), again.to_canonical_csv());
        let rate = generate_synthetic(400, 50, 5, 3).unwrap().correct_rate();
        assert!((0.3..=0.9).contains(&rate), "correct rate {rate}");
    }

    #[test]
    fn synthetic_degenerate_size() {
        let d = generate_synthetic(1, 1, 1, 0).unwrap();
        assert_eq!(d.students.len(), 1);
        assert!(d.students[0].interactions.iter().all(|i| i.question == 0));
        assert!(generate_synthetic(0, 1, 1, 0).is_err());
        assert!(generate_synthetic(1, 1, 4, 0).is_err());
    }

    #[test]
    fn synthetic_links_every_kc() {
        let d = generate_synthetic(2, 4, 12, 9).unwrap();
        let used: BTreeSet<usize> = d.question_kcs.iter().flatten().copied().collect();
        assert_eq!(used.len(), 12);
    }

    #[test]
    fn folds_even_and_remainder() {
        let d = generate_synthetic(10, 3, 2, 0).unwrap();
        let f = make_folds(&d, 5, 7).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        let d = generate_synthetic(11, 3, 2, 0).unwrap();
        let f = make_folds(&d, 5, 7).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_eq!(f, make_folds(&d, 5, 7).unwrap());
        assert!(make_folds(&d, 12, 7).is_err());
        assert!(make_folds(&d, 1, 7).is_err());
    }

    #[test]
    fn validation_split_is_disjoint_and_non_empty() {
        let d = generate_synthetic(100, 3, 2, 0).unwrap();
        let f = make_folds(&d, 5, 1).unwrap();
        let (train, valid) = f.train_validation(2, 0.05);
        assert_eq!(valid.len(), 4);
        assert_eq!(train.len() + valid.len(), 80);
        let test: BTreeSet<u64> = f.test_students(2).into_iter().collect();
        assert!(train.iter().chain(valid.iter()).all(|s| !test.contains(s)));
        assert!(valid.iter().all(|s| !train.contains(s)));
    }

    #[test]
    fn window_tiling_examples() {
        let log = |n: usize| StudentLog {
            student_id: 0,
            interactions: (0..n)
                .map(|t| Interaction {
                    question: t % 3,
                    answer: (t % 2) as u8,
                    order: t as u64,
                })
                .collect(),
        };
        let lens = |n| windows_of(&log(n), 15).iter().map(|w| w.interactions.len()).collect::<Vec<_>>();
        assert_eq!(lens(33), vec![15, 15, 3]);
        assert_eq!(lens(15), vec![15]);
        assert_eq!(lens(1), vec![1]);
        let d = generate_synthetic(1, 2, 1, 0).unwrap();
        assert!(window_sequences(&d, 0).is_err());
    }

    #[test]
    fn canonical_load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "c.csv", "student_id,order,question_id,kc_ids,answer\n0,0,0,0,2\n");
        assert!(matches!(CanonicalDataset::load_canonical(&p), Err(TgmnError::Format { line: 2, .. })));
        let p = write_file(dir.path(), "c.csv", "student_id,order,question_id,kc_ids,answer\n0,1,0,0,1\n0,0,0,0,1\n");
        assert!(matches!(CanonicalDataset::load_canonical(&p), Err(TgmnError::Format { line: 3, .. })));
        let p = write_file(dir.path(), "c.csv", "a,b\n0,1\n");
        assert!(matches!(CanonicalDataset::load_canonical(&p), Err(TgmnError::Format { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn canonical_round_trip(students in 1usize..8, questions in 1usize..6, kcs in 1usize..4, seed in any::<u64>()) {
            prop_assume!(kcs <= 3 * questions);
            let d = generate_synthetic(students, questions, kcs, seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.csv");
            d.write_canonical(&p).unwrap();
            prop_assert_eq!(CanonicalDataset::load_canonical(&p).unwrap(), d);
        }

        #[test]
        fn folds_partition_students(students in 2usize..40, k in 2usize..6, seed in any::<u64>()) {
            prop_assume!(k <= students);
            let d = generate_synthetic(students, 2, 1, seed).unwrap();
            let f = make_folds(&d, k, seed).unwrap();
            let mut all: Vec<u64> = (0..k).flat_map(|i| f.test_students(i)).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..students as u64).collect::<Vec<_>>());
            let sizes = f.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn windows_reassemble_logs(n in 1usize..60, s in 1usize..20) {
            let log = StudentLog {
                student_id: 3,
                interactions: (0..n).map(|t| Interaction { question: t % 4, answer: (t % 2) as u8, order: t as u64 }).collect(),
            };
            let windows = windows_of(&log, s);
            let flat: Vec<(usize, u8)> = windows.iter().flat_map(|w| w.interactions.clone()).collect();
            let original: Vec<(usize, u8)> = log.interactions.iter().map(|i| (i.question, i.answer)).collect();
            prop_assert_eq!(flat, original);
            prop_assert!(windows.iter().all(|w| (1..=s).contains(&w.interactions.len())));
        }
    }
}
