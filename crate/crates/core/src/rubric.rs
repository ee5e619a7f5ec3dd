//! Scoresheets for the four judged benchmarks, their validation, exact
//! aggregation and report rendering.
//!
//! Averages are kept as exact ratios of integers and rounded half-up only
//! when rendered: one decimal for benchmark averages, two for the overall
//! score (the mean of the four averages).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::fmt::{self, Write as _};
use thiserror::Error;

pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Benchmark {
    /// Image description.
    Idc,
    /// Image sentiment analysis.
    Isac,
    /// Image content reasoning.
    Icrc,
    /// Multi-detail image understanding.
    Mdiuc,
}

impl Benchmark {
    pub const ALL: [Benchmark; 4] = [Benchmark::Idc, Benchmark::Isac, Benchmark::Icrc, Benchmark::Mdiuc];

    pub fn key(self) -> &'static str {
        match self {
            Benchmark::Idc => "idc",
            Benchmark::Isac => "isac",
            Benchmark::Icrc => "icrc",
            Benchmark::Mdiuc => "mdiuc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Benchmark::Idc => "IDC",
            Benchmark::Isac => "ISAC",
            Benchmark::Icrc => "ICRC",
            Benchmark::Mdiuc => "MDIUC",
        }
    }

    pub fn item_count(self) -> usize {
        match self {
            Benchmark::Idc | Benchmark::Isac => 10,
            Benchmark::Icrc => 5,
            Benchmark::Mdiuc => 2,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A validated scoresheet. Construct through [`validate_scoresheet`] or
/// [`ScoreSheet::new`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub model_name: String,
    pub idc: Vec<u8>,
    pub isac: Vec<u8>,
    pub icrc: Vec<u8>,
    pub mdiuc: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    NotAnObject,
    MissingField,
    UnknownField,
    BadName,
    NotAList,
    Count { expected: usize, actual: usize },
    NotInteger,
    OutOfRange,
}

/// One problem with a raw scoresheet. `field` is a benchmark key or a
/// top-level field name; `index` is 0-based within the benchmark list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub index: Option<usize>,
    pub value: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = match self.index {
            Some(i) => format!("{}[{i}]", self.field),
            None => self.field.clone(),
        };
        match &self.kind {
            ViolationKind::NotAnObject => write!(f, "scoresheet must be a JSON object, got {}", self.value),
            ViolationKind::MissingField => write!(f, "{at}: missing"),
            ViolationKind::UnknownField => write!(f, "{at}: unknown field"),
            ViolationKind::BadName => write!(f, "{at}: expected a non-empty string, got {}", self.value),
            ViolationKind::NotAList => write!(f, "{at}: expected a list of scores, got {}", self.value),
            ViolationKind::Count { expected, actual } => {
                write!(f, "{at}: expected {expected} scores, got {actual}")
            }
            ViolationKind::NotInteger => write!(f, "{at}: {} is not an integer", self.value),
            ViolationKind::OutOfRange => write!(f, "{at}: {} is outside 0..={MAX_SCORE}", self.value),
        }
    }
}

#[derive(Debug, Error)]
pub enum RubricError {
    #[error("invalid scoresheet:\n{}", list(.0))]
    Invalid(Vec<Violation>),
    #[error("scoresheet is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot average an empty score list")]
    Empty,
    #[error("no scoresheets given")]
    NoSheets,
    #[error("duplicate model name `{0}`")]
    DuplicateModel(String),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

impl ScoreSheet {
    pub fn new(
        model_name: impl Into<String>,
        idc: Vec<u8>,
        isac: Vec<u8>,
        icrc: Vec<u8>,
        mdiuc: Vec<u8>,
    ) -> Result<Self, RubricError> {
        let s = Self {
            model_name: model_name.into(),
            idc,
            isac,
            icrc,
            mdiuc,
        };
        let raw = serde_json::to_value(&s)?;
        validate_scoresheet(&raw)
    }

    pub fn scores(&self, b: Benchmark) -> &[u8] {
        match b {
            Benchmark::Idc => &self.idc,
            Benchmark::Isac => &self.isac,
            Benchmark::Icrc => &self.icrc,
            Benchmark::Mdiuc => &self.mdiuc,
        }
    }

    pub fn scores_mut(&mut self, b: Benchmark) -> &mut Vec<u8> {
        match b {
            Benchmark::Idc => &mut self.idc,
            Benchmark::Isac => &mut self.isac,
            Benchmark::Icrc => &mut self.icrc,
            Benchmark::Mdiuc => &mut self.mdiuc,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RubricError> {
        validate_scoresheet(&serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scoresheet serializes")
    }
}

/// Checks a raw JSON scoresheet and reports every violation found.
pub fn validate_scoresheet(raw: &Value) -> Result<ScoreSheet, RubricError> {
    let Some(obj) = raw.as_object() else {
        return Err(RubricError::Invalid(vec![Violation {
            field: String::new(),
            index: None,
            value: raw.to_string(),
            kind: ViolationKind::NotAnObject,
        }]));
    };
    let mut out = Vec::new();
    let mut bad = |field: &str, index, value: String, kind| {
        out.push(Violation {
            field: field.to_string(),
            index,
            value,
            kind,
        })
    };
    for key in obj.keys() {
        if key != "model_name" && Benchmark::ALL.iter().all(|b| b.key() != key) {
            bad(key, None, String::new(), ViolationKind::UnknownField);
        }
    }
    let name = match obj.get("model_name") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(v) => {
            bad("model_name", None, v.to_string(), ViolationKind::BadName);
            String::new()
        }
        None => {
            bad("model_name", None, String::new(), ViolationKind::MissingField);
            String::new()
        }
    };
    let mut lists: Vec<Vec<u8>> = Vec::with_capacity(4);
    for b in Benchmark::ALL {
        let mut scores = Vec::new();
        match obj.get(b.key()) {
            None => bad(b.key(), None, String::new(), ViolationKind::MissingField),
            Some(Value::Array(items)) => {
                if items.len() != b.item_count() {
                    bad(
                        b.key(),
                        None,
                        items.len().to_string(),
                        ViolationKind::Count {
                            expected: b.item_count(),
                            actual: items.len(),
                        },
                    );
                }
                for (i, v) in items.iter().enumerate() {
                    let int = v.as_i64().or_else(|| v.as_u64().map(|u| u.min(i64::MAX as u64) as i64));
                    match int {
                        Some(n) if (0..=MAX_SCORE as i64).contains(&n) => scores.push(n as u8),
                        Some(_) => bad(b.key(), Some(i), v.to_string(), ViolationKind::OutOfRange),
                        None => bad(b.key(), Some(i), v.to_string(), ViolationKind::NotInteger),
                    }
                }
            }
            Some(v) => bad(b.key(), None, v.to_string(), ViolationKind::NotAList),
        }
        lists.push(scores);
    }
    if !out.is_empty() {
        return Err(RubricError::Invalid(out));
    }
    let mut it = lists.into_iter();
    let mut next = || it.next().unwrap_or_default();
    Ok(ScoreSheet {
        model_name: name,
        idc: next(),
        isac: next(),
        icrc: next(),
        mdiuc: next(),
    })
}

/// Exact non-negative rational `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Parses a plain decimal such as `2.35`.
    fn parse2(s: &str) -> Ratio {
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        let den = 10u64.pow(frac.len() as u32);
        let num = int.parse::<u64>().unwrap_or(0) * den + frac.parse::<u64>().unwrap_or(0);
        Ratio { num, den }
    }

    /// Decimal rendering rounded half-up.
    pub fn render(self, decimals: u32) -> String {
        let scale = 10u64.pow(decimals);
        // floor((num * scale) / den + 1/2)
        let scaled = (2 * self.num * scale + self.den) / (2 * self.den);
        if decimals == 0 {
            return scaled.to_string();
        }
        let (int, frac) = (scaled / scale, scaled % scale);
        format!("{int}.{frac:0width$}", width = decimals as usize)
    }
}

fn exact_average(scores: &[u8]) -> Result<Ratio, RubricError> {
    if scores.is_empty() {
        return Err(RubricError::Empty);
    }
    Ok(Ratio {
        num: scores.iter().map(|&s| s as u64).sum(),
        den: scores.len() as u64,
    })
}

/// Arithmetic mean at full precision.
pub fn benchmark_average(scores: &[u8]) -> Result<f64, RubricError> {
    exact_average(scores).map(Ratio::value)
}

/// Mean of the four benchmark averages as an exact ratio.
pub fn overall_ratio(sheet: &ScoreSheet) -> Ratio {
    // sum_b (s_b / n_b) / 4 over the common denominator 4 * prod n_b.
    let dens: Vec<u64> = Benchmark::ALL
        .iter()
        .map(|&b| sheet.scores(b).len().max(1) as u64)
        .collect();
    let common: u64 = dens.iter().product();
    let num: u64 = Benchmark::ALL
        .iter()
        .zip(&dens)
        .map(|(&b, &n)| sheet.scores(b).iter().map(|&s| s as u64).sum::<u64>() * (common / n))
        .sum();
    let den = 4 * common;
    let g = gcd(num, den);
    Ratio {
        num: num / g,
        den: den / g,
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

pub fn overall_score(sheet: &ScoreSheet) -> f64 {
    overall_ratio(sheet).value()
}

/// Overall scores reported elsewhere for the reference models, compared
/// against the recomputed value when a report includes those models.
pub const REPORTED_OVERALL: [(&str, &str); 2] = [("ArtGPT-4", "3.4"), ("MiniGPT-4", "2.35")];

/// Reported gaps between two models' overall scores. Both figures are
/// listed because they disagree with each other.
pub const REPORTED_GAPS: [(&str, &str, &str); 2] = [("Human", "ArtGPT-4", "0.15"), ("Human", "ArtGPT-4", "0.25")];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model_name: String,
    /// Benchmark averages in [`Benchmark::ALL`] order.
    pub averages: [f64; 4],
    pub overall: f64,
    pub rendered_averages: [String; 4],
    pub rendered_overall: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub models: Vec<ModelSummary>,
    pub notes: Vec<String>,
    pub text: String,
    /// `model,benchmark,item,score`
    pub items_csv: String,
    /// `model,benchmark,average`
    pub summary_csv: String,
}

fn summarize(sheet: &ScoreSheet) -> ModelSummary {
    let ratios = Benchmark::ALL.map(|b| exact_average(sheet.scores(b)).expect("validated sheet"));
    let overall = overall_ratio(sheet);
    ModelSummary {
        model_name: sheet.model_name.clone(),
        averages: ratios.map(Ratio::value),
        overall: overall.value(),
        rendered_averages: ratios.map(|r| r.render(1)),
        rendered_overall: overall.render(2),
    }
}

fn csv_string(rows: &[Vec<String>], header: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Per-benchmark tables, an overall table, and both CSV views.
pub fn render_report(sheets: &[ScoreSheet]) -> Result<BenchmarkReport, RubricError> {
    if sheets.is_empty() {
        return Err(RubricError::NoSheets);
    }
    let mut seen = HashSet::new();
    for s in sheets {
        if !seen.insert(s.model_name.as_str()) {
            return Err(RubricError::DuplicateModel(s.model_name.clone()));
        }
        validate_scoresheet(&serde_json::to_value(s)?)?;
    }
    let models: Vec<ModelSummary> = sheets.iter().map(summarize).collect();
    let name_w = sheets
        .iter()
        .map(|s| s.model_name.chars().count())
        .max()
        .unwrap_or(0)
        .max("Model".len());

    let mut text = String::new();
    for (bi, b) in Benchmark::ALL.iter().enumerate() {
        let n = b.item_count();
        let _ = writeln!(text, "{}", b.label());
        let _ = write!(text, "{:<name_w$}", "Model");
        for i in 1..=n {
            let _ = write!(text, " {i:>2}");
        }
        let _ = writeln!(text, "  Average");
        for (s, m) in sheets.iter().zip(&models) {
            let _ = write!(text, "{:<name_w$}", s.model_name);
            for v in s.scores(*b) {
                let _ = write!(text, " {v:>2}");
            }
            let _ = writeln!(text, "  {:>7}", m.rendered_averages[bi]);
        }
        text.push('\n');
    }
    let _ = writeln!(text, "Overall");
    let _ = write!(text, "{:<name_w$}", "Model");
    for b in Benchmark::ALL {
        let _ = write!(text, " {:>6}", b.label());
    }
    let _ = writeln!(text, "  Overall");
    for m in &models {
        let _ = write!(text, "{:<name_w$}", m.model_name);
        for a in &m.rendered_averages {
            let _ = write!(text, " {a:>6}");
        }
        let _ = writeln!(text, "  {:>7}", m.rendered_overall);
    }

    let mut notes = Vec::new();
    for m in &models {
        if let Some((_, reported)) = REPORTED_OVERALL.iter().find(|(n, _)| *n == m.model_name) {
            let reported_val: f64 = reported.parse().expect("constant");
            if (reported_val - m.overall).abs() > 1e-9 {
                notes.push(format!(
                    "{}: overall recomputed from the item scores is {}; the previously reported figure is {}",
                    m.model_name, m.rendered_overall, reported
                ));
            }
        }
    }
    for (a, b, reported) in REPORTED_GAPS {
        let find = |n: &str| sheets.iter().find(|s| s.model_name == n);
        let (Some(sa), Some(sb)) = (find(a), find(b)) else {
            continue;
        };
        let (ra, rb) = (overall_ratio(sa), overall_ratio(sb));
        // |ra - rb| as an exact ratio
        let (x, y) = (ra.num * rb.den, rb.num * ra.den);
        let gap = Ratio {
            num: x.abs_diff(y),
            den: ra.den * rb.den,
        };
        if gap.render(2) != Ratio::parse2(reported).render(2) {
            notes.push(format!(
                "{a} vs {b}: recomputed overall gap is {}; a gap of {reported} has also been reported",
                gap.render(2)
            ));
        }
    }
    if !notes.is_empty() {
        text.push('\n');
        for n in &notes {
            let _ = writeln!(text, "note: {n}");
        }
    }

    let mut item_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for (s, m) in sheets.iter().zip(&models) {
        for (bi, b) in Benchmark::ALL.iter().enumerate() {
            for (i, v) in s.scores(*b).iter().enumerate() {
                item_rows.push(vec![
                    s.model_name.clone(),
                    b.label().to_string(),
                    (i + 1).to_string(),
                    v.to_string(),
                ]);
            }
            summary_rows.push(vec![
                s.model_name.clone(),
                b.label().to_string(),
                m.rendered_averages[bi].clone(),
            ]);
        }
        summary_rows.push(vec![s.model_name.clone(), "overall".into(), m.rendered_overall.clone()]);
    }

    Ok(BenchmarkReport {
        items_csv: csv_string(&item_rows, &["model", "benchmark", "item", "score"]),
        summary_csv: csv_string(&summary_rows, &["model", "benchmark", "average"]),
        models,
        notes,
        text,
    })
}

/// The five scored systems: artists, GIT, ViLT, MiniGPT-4 and ArtGPT-4.
pub fn reference_sheets() -> Vec<ScoreSheet> {
    let s = |name: &str, idc: [u8; 10], isac: [u8; 10], icrc: [u8; 5], mdiuc: [u8; 2]| ScoreSheet {
        model_name: name.to_string(),
        idc: idc.to_vec(),
        isac: isac.to_vec(),
        icrc: icrc.to_vec(),
        mdiuc: mdiuc.to_vec(),
    };
    vec![
        s(
            "Human",
            [4, 4, 4, 4, 4, 3, 4, 5, 4, 5],
            [3, 4, 3, 3, 3, 3, 3, 3, 3, 3],
            [3; 5],
            [4, 4],
        ),
        s("GIT", [2; 10], [1; 10], [1; 5], [0, 0]),
        s("ViLT", [1, 1, 2, 1, 1, 2, 1, 1, 1, 1], [0; 10], [1; 5], [0, 0]),
        s(
            "MiniGPT-4",
            [2, 3, 3, 1, 2, 2, 4, 3, 3, 3],
            [2, 3, 2, 3, 2, 2, 2, 2, 3, 2],
            [1, 2, 2, 2, 2],
            [3, 2],
        ),
        s(
            "ArtGPT-4",
            [4, 4, 3, 4, 4, 3, 4, 5, 3, 4],
            [3, 3, 1, 3, 3, 3, 3, 3, 3, 3],
            [3, 4, 2, 3, 3],
            [4, 4],
        ),
    ]
}
