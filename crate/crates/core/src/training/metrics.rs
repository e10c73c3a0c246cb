use crate::policy::Phase;
use crate::training::losses::LossParts;
use crate::{Error, Result};

pub const COLUMNS: [&str; 8] = [
    "epoch",
    "phase",
    "L_total",
    "L_KL",
    "L_JA",
    "L_tactile",
    "L_arm",
    "wall_ms",
];

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub parts: LossParts,
    pub wall_ms: u64,
}

/// Per-epoch training log, written as CSV behind a `# config_digest=` line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub config_digest: String,
    pub records: Vec<EpochRecord>,
}

fn row(r: &EpochRecord, wall: bool) -> String {
    let tactile = r
        .parts
        .tactile
        .map_or_else(|| "NA".to_string(), |t| t.to_string());
    let mut s = format!(
        "{},{},{},{},{},{},{}",
        r.epoch,
        r.phase.name(),
        r.total,
        r.parts.kl,
        r.parts.joint,
        tactile,
        r.parts.arm
    );
    if wall {
        s.push_str(&format!(",{}", r.wall_ms));
    }
    s
}

impl MetricsLog {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            records: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# config_digest={}\n{}\n",
            self.config_digest,
            COLUMNS.join(",")
        );
        for r in &self.records {
            s.push_str(&row(r, true));
            s.push('\n');
        }
        s
    }

    /// The CSV without the `wall_ms` column, the part that must repeat exactly.
    pub fn deterministic_text(&self) -> String {
        let mut s = format!(
            "# config_digest={}\n{}\n",
            self.config_digest,
            COLUMNS[..7].join(",")
        );
        for r in &self.records {
            s.push_str(&row(r, false));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad =
            |line: usize, msg: &str| Error::Incompatible(format!("metrics log line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let digest = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("# config_digest=")
                .ok_or_else(|| bad(1, "missing digest header"))?
                .to_string(),
            None => return Err(bad(1, "empty")),
        };
        match lines.next() {
            Some((_, l)) if l == COLUMNS.join(",") => {}
            _ => return Err(bad(2, "unexpected column header")),
        }
        let mut records = Vec::new();
        for (i, l) in lines {
            let n = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(n, "wrong field count"));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(n, &format!("bad number {s:?}")))
            };
            let phase = match f[1] {
                "ground_truth" => Phase::GroundTruth,
                "predicted" => Phase::Predicted,
                other => return Err(bad(n, &format!("unknown phase {other:?}"))),
            };
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(n, "bad epoch"))?,
                phase,
                total: num(f[2])?,
                parts: LossParts {
                    kl: num(f[3])?,
                    joint: num(f[4])?,
                    tactile: if f[5] == "NA" { None } else { Some(num(f[5])?) },
                    arm: num(f[6])?,
                },
                wall_ms: f[7].parse().map_err(|_| bad(n, "bad wall_ms"))?,
            });
        }
        Ok(Self {
            config_digest: digest,
            records,
        })
    }
}
