//! Stage-weighted scoring: `HNS = Σ wᵢ·sᵢ / (3·Σ wᵢ)` with raw stage scores in `[0, 3]`.
//!
//! Task schemes are plain-text data files:
//!
//! ```text
//! task peg_insertion
//! stage 1 grasp 1          # index, name, weight
//! level 3 held firmly      # score description
//! success s1 == 3, s2 >= 2 # comma means "and"; `all >= 1` covers every stage
//! reference ours 3.0 2.7 = 0.93
//! ```
//!
//! `reference` lines carry table rows with a two-decimal HNS, used to check
//! the arithmetic.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MAX_SCORE: f64 = 3.0;

/// Agreement allowed between a recomputed HNS and a two-decimal reference.
pub const REFERENCE_TOLERANCE: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HnsError {
    #[error("expected {expected} stage scores, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("stage {stage} score {value} is outside [0, 3]")]
    ScoreRange { stage: usize, value: f64 },
    #[error("stage {stage} weight {value} must be positive")]
    Weight { stage: usize, value: f64 },
    #[error("scheme line {line}: {msg}")]
    Scheme { line: usize, msg: String },
    #[error("score sheet line {line}: {msg}")]
    Sheet { line: usize, msg: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

type Result<T> = std::result::Result<T, HnsError>;

/// Weighted normalized mean of raw stage scores.
pub fn hns(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(HnsError::LengthMismatch {
            expected: weights.len(),
            found: scores.len(),
        });
    }
    for (i, (&s, &w)) in scores.iter().zip(weights).enumerate() {
        if !(w > 0.0 && w.is_finite()) {
            return Err(HnsError::Weight {
                stage: i + 1,
                value: w,
            });
        }
        if !(0.0..=MAX_SCORE).contains(&s) {
            return Err(HnsError::ScoreRange {
                stage: i + 1,
                value: s,
            });
        }
    }
    let num: f64 = scores.iter().zip(weights).map(|(s, w)| s * w).sum();
    let den: f64 = weights.iter().sum();
    Ok(num / (MAX_SCORE * den))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    /// 1-based.
    pub index: usize,
    pub name: String,
    pub weight: f64,
    /// `(score or range, description)`, in file order.
    pub levels: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ge,
    Gt,
    Le,
    Lt,
}

impl Cmp {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Cmp::Eq => a == b,
            Cmp::Ge => a >= b,
            Cmp::Gt => a > b,
            Cmp::Le => a <= b,
            Cmp::Lt => a < b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Cmp::Eq => "==",
            Cmp::Ge => ">=",
            Cmp::Gt => ">",
            Cmp::Le => "<=",
            Cmp::Lt => "<",
        }
    }
}

impl FromStr for Cmp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "==" => Cmp::Eq,
            ">=" => Cmp::Ge,
            ">" => Cmp::Gt,
            "<=" => Cmp::Le,
            "<" => Cmp::Lt,
            _ => return Err(format!("unknown comparison {s:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clause {
    /// 1-based stage index.
    Stage {
        stage: usize,
        cmp: Cmp,
        value: f64,
    },
    All {
        cmp: Cmp,
        value: f64,
    },
}

/// Conjunction of clauses over stage scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SuccessRule {
    pub clauses: Vec<Clause>,
}

impl SuccessRule {
    pub fn holds(&self, scores: &[f64]) -> bool {
        self.clauses.iter().all(|c| match *c {
            Clause::Stage { stage, cmp, value } => cmp.holds(scores[stage - 1], value),
            Clause::All { cmp, value } => scores.iter().all(|&s| cmp.holds(s, value)),
        })
    }

    fn parse(text: &str, stages: usize) -> std::result::Result<Self, String> {
        let mut clauses = Vec::new();
        for part in text.split(',') {
            let toks: Vec<&str> = part.split_whitespace().collect();
            let [lhs, op, rhs] = toks[..] else {
                return Err(format!("clause {:?} is not `lhs op value`", part.trim()));
            };
            let cmp: Cmp = op.parse()?;
            let value: f64 = rhs.parse().map_err(|_| format!("bad value {rhs:?}"))?;
            let clause = if lhs == "all" {
                Clause::All { cmp, value }
            } else {
                let stage: usize = lhs
                    .strip_prefix('s')
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| format!("bad stage reference {lhs:?}"))?;
                if stage == 0 || stage > stages {
                    return Err(format!("rule names stage {stage}, but there are {stages}"));
                }
                Clause::Stage { stage, cmp, value }
            };
            clauses.push(clause);
        }
        Ok(Self { clauses })
    }
}

impl fmt::Display for SuccessRule {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match c {
                Clause::Stage { stage, cmp, value } => {
                    write!(f, "s{stage} {} {value}", cmp.symbol())?
                }
                Clause::All { cmp, value } => write!(f, "all {} {value}", cmp.symbol())?,
            }
        }
        Ok(())
    }
}

/// A table row: stage scores and the HNS printed next to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRow {
    pub label: String,
    pub scores: Vec<f64>,
    pub printed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCheck {
    pub label: String,
    pub recomputed: f64,
    pub printed: f64,
}

impl ReferenceCheck {
    pub fn agrees(&self) -> bool {
        (self.recomputed - self.printed).abs() <= REFERENCE_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScheme {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub rule: SuccessRule,
    pub references: Vec<ReferenceRow>,
}

const BUILTIN: [(&str, &str); 6] = [
    (
        "peg_insertion",
        include_str!("../schemes/peg_insertion.scheme"),
    ),
    ("cap_twist", include_str!("../schemes/cap_twist.scheme")),
    ("vase_wipe", include_str!("../schemes/vase_wipe.scheme")),
    ("book_flip", include_str!("../schemes/book_flip.scheme")),
    ("hamburger", include_str!("../schemes/hamburger.scheme")),
    (
        "synth_insertion",
        include_str!("../schemes/synth_insertion.scheme"),
    ),
];

impl TaskScheme {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| HnsError::UnknownTask(name.to_string()))?;
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| HnsError::Scheme { line, msg };
        let mut name = None;
        let mut stages: Vec<StageSpec> = Vec::new();
        let mut rule_text = None;
        let mut refs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            let Some((kw, rest)) = line.split_once(char::is_whitespace) else {
                if line.is_empty() {
                    continue;
                }
                return Err(err(n, format!("malformed line {line:?}")));
            };
            let rest = rest.trim();
            match kw {
                "task" => name = Some(rest.to_string()),
                "stage" => {
                    let t: Vec<&str> = rest.split_whitespace().collect();
                    let [idx, sname, w] = t[..] else {
                        return Err(err(n, "expected `stage <index> <name> <weight>`".into()));
                    };
                    let index: usize = idx
                        .parse()
                        .map_err(|_| err(n, format!("bad index {idx:?}")))?;
                    if index != stages.len() + 1 {
                        return Err(err(n, format!("stage {index} out of order")));
                    }
                    let weight: f64 = w.parse().map_err(|_| err(n, format!("bad weight {w:?}")))?;
                    if !(weight > 0.0 && weight.is_finite()) {
                        return Err(err(n, format!("weight {w} must be positive")));
                    }
                    stages.push(StageSpec {
                        index,
                        name: sname.to_string(),
                        weight,
                        levels: Vec::new(),
                    });
                }
                "level" => {
                    let st = stages
                        .last_mut()
                        .ok_or_else(|| err(n, "level before any stage".into()))?;
                    let (score, desc) = rest
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| err(n, "expected `level <score> <description>`".into()))?;
                    st.levels.push((score.to_string(), desc.trim().to_string()));
                }
                "success" => rule_text = Some((n, rest.to_string())),
                "reference" => {
                    let (lhs, printed) = rest.split_once('=').ok_or_else(|| {
                        err(n, "expected `reference <label> <scores..> = <hns>`".into())
                    })?;
                    let mut t = lhs.split_whitespace();
                    let label = t
                        .next()
                        .ok_or_else(|| err(n, "missing label".into()))?
                        .to_string();
                    let scores = t
                        .map(|s| {
                            s.parse::<f64>()
                                .map_err(|_| err(n, format!("bad score {s:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let printed = printed
                        .trim()
                        .parse()
                        .map_err(|_| err(n, format!("bad value {:?}", printed.trim())))?;
                    refs.push((
                        n,
                        ReferenceRow {
                            label,
                            scores,
                            printed,
                        },
                    ));
                }
                other => return Err(err(n, format!("unknown keyword {other:?}"))),
            }
        }
        let name = name.ok_or_else(|| err(0, "missing task line".into()))?;
        if stages.is_empty() {
            return Err(err(0, "no stages".into()));
        }
        let (rl, rt) = rule_text.ok_or_else(|| err(0, "missing success rule".into()))?;
        let rule = SuccessRule::parse(&rt, stages.len()).map_err(|m| err(rl, m))?;
        let mut references = Vec::new();
        for (n, r) in refs {
            if r.scores.len() != stages.len() {
                return Err(err(
                    n,
                    format!("{} scores for {} stages", r.scores.len(), stages.len()),
                ));
            }
            references.push(r);
        }
        Ok(Self {
            name,
            stages,
            rule,
            references,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.weight).collect()
    }

    pub fn hns(&self, scores: &[f64]) -> Result<f64> {
        hns(scores, &self.weights())
    }

    pub fn success(&self, scores: &[f64]) -> Result<bool> {
        self.hns(scores)?;
        Ok(self.rule.holds(scores))
    }

    pub fn score(&self, label: impl Into<String>, scores: &[f64]) -> Result<HnsReport> {
        Ok(HnsReport {
            label: label.into(),
            scores: scores.to_vec(),
            hns: self.hns(scores)?,
            success: self.rule.holds(scores),
        })
    }

    pub fn reference_checks(&self) -> Result<Vec<ReferenceCheck>> {
        self.references
            .iter()
            .map(|r| {
                Ok(ReferenceCheck {
                    label: r.label.clone(),
                    recomputed: self.hns(&r.scores)?,
                    printed: r.printed,
                })
            })
            .collect()
    }
}

/// One scored run.
#[derive(Clone, Debug, PartialEq)]
pub struct HnsReport {
    pub label: String,
    pub scores: Vec<f64>,
    pub hns: f64,
    pub success: bool,
}

/// Means over runs of one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub label: String,
    pub runs: usize,
    pub stage_means: Vec<f64>,
    pub mean_hns: f64,
    pub success_rate: f64,
}

pub fn aggregate(label: impl Into<String>, reports: &[HnsReport]) -> Aggregate {
    let n = reports.len();
    let stages = reports.first().map_or(0, |r| r.scores.len());
    let div = n.max(1) as f64;
    let stage_means = (0..stages)
        .map(|i| reports.iter().map(|r| r.scores[i]).sum::<f64>() / div)
        .collect();
    Aggregate {
        label: label.into(),
        runs: n,
        stage_means,
        mean_hns: reports.iter().map(|r| r.hns).sum::<f64>() / div,
        success_rate: reports.iter().filter(|r| r.success).count() as f64 / div,
    }
}

/// Comma-separated table: one row per run, then one per aggregate.
pub fn report_table(scheme: &TaskScheme, runs: &[HnsReport], aggregates: &[Aggregate]) -> String {
    let mut s = String::from("label");
    for st in &scheme.stages {
        s.push_str(&format!(",stage_{}", st.index));
    }
    s.push_str(",hns,success\n");
    for r in runs {
        s.push_str(&r.label);
        for v in &r.scores {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{:.4},{}\n", r.hns, u8::from(r.success)));
    }
    for a in aggregates {
        s.push_str(&a.label);
        for v in &a.stage_means {
            s.push_str(&format!(",{v:.4}"));
        }
        s.push_str(&format!(",{:.4},{:.4}\n", a.mean_hns, a.success_rate));
    }
    s
}

/// A parsed score-sheet line.
#[derive(Clone, Debug, PartialEq)]
pub struct SheetRow {
    pub line: usize,
    pub task: String,
    pub scores: Vec<f64>,
}

/// One run per line: task name, then the stage scores. `#` starts a comment.
pub fn parse_score_sheet(text: &str) -> Result<Vec<SheetRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut t = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty());
        let task = t.next().expect("line is not empty").to_string();
        let scores = t
            .map(|s| {
                s.parse::<f64>().map_err(|_| HnsError::Sheet {
                    line: i + 1,
                    msg: format!("bad score {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if scores.is_empty() {
            return Err(HnsError::Sheet {
                line: i + 1,
                msg: "no scores".into(),
            });
        }
        rows.push(SheetRow {
            line: i + 1,
            task,
            scores,
        });
    }
    Ok(rows)
}

/// Scores every row of a sheet against `scheme`; errors carry the sheet line.
pub fn score_sheet(scheme: &TaskScheme, rows: &[SheetRow]) -> Result<Vec<HnsReport>> {
    rows.iter()
        .enumerate()
        .map(|(k, r)| {
            if r.task != scheme.name {
                return Err(HnsError::Sheet {
                    line: r.line,
                    msg: format!("task {:?} does not match scheme {:?}", r.task, scheme.name),
                });
            }
            scheme
                .score(format!("run_{k}"), &r.scores)
                .map_err(|e| HnsError::Sheet {
                    line: r.line,
                    msg: e.to_string(),
                })
        })
        .collect()
}
