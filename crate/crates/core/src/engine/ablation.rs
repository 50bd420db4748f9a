use std::fmt;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_student, train_teacher, Config, TrainOptions};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::losses::TermFlags;
use crate::metrics::align_table;
use crate::models::TinyNet;

/// Rows of the term-flag grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
}

impl Scheme {
    pub const ALL: [Scheme; 10] = [
        Scheme::A,
        Scheme::B,
        Scheme::C,
        Scheme::D,
        Scheme::E,
        Scheme::F,
        Scheme::G,
        Scheme::H,
        Scheme::I,
        Scheme::J,
    ];
    pub const DEFAULT_GRID: [Scheme; 6] = [
        Scheme::A,
        Scheme::B,
        Scheme::C,
        Scheme::D,
        Scheme::E,
        Scheme::J,
    ];

    pub fn terms(self) -> TermFlags {
        let t = |sf, pf, mf, tl| TermFlags { sf, pf, mf, tl };
        match self {
            Scheme::A => t(false, false, false, false),
            Scheme::B => t(true, false, false, false),
            Scheme::C => t(false, true, false, false),
            Scheme::D => t(false, false, true, false),
            Scheme::E => t(false, false, false, true),
            Scheme::F => t(false, true, true, false),
            Scheme::G => t(true, false, false, true),
            Scheme::H => t(false, true, true, true),
            Scheme::I => t(true, true, true, false),
            Scheme::J => t(true, true, true, true),
        }
    }

    pub fn letter(self) -> char {
        (b'a' + Scheme::ALL.iter().position(|&s| s == self).unwrap() as u8) as char
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Scheme::ALL
                .iter()
                .copied()
                .find(|sch| sch.letter() == c.to_ascii_lowercase())
                .ok_or_else(|| Error::validation(format!("unknown scheme '{s}' (expected a..j)"))),
            _ => Err(Error::validation(format!(
                "unknown scheme '{s}' (expected a..j)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SchemeOutcome {
    Done {
        miou: f64,
        pixel_accuracy: f64,
        tc: f64,
    },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub scheme: Scheme,
    pub terms: TermFlags,
    pub outcome: SchemeOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, scheme: Scheme) -> Option<(f64, f64, f64)> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme)
            .and_then(|r| match r.outcome {
                SchemeOutcome::Done {
                    miou,
                    pixel_accuracy,
                    tc,
                } => Some((miou, pixel_accuracy, tc)),
                SchemeOutcome::Failed(_) => None,
            })
    }

    pub fn has_failures(&self) -> bool {
        self.rows
            .iter()
            .any(|r| matches!(r.outcome, SchemeOutcome::Failed(_)))
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let mark = |b: bool| if b { "x" } else { "" }.to_string();
        let mut rows = vec![[
            "scheme",
            "sf",
            "pf",
            "mf",
            "tl",
            "miou",
            "pixel_accuracy",
            "tc",
        ]
        .map(String::from)
        .to_vec()];
        for r in &self.rows {
            let mut row = vec![
                r.scheme.to_string(),
                mark(r.terms.sf),
                mark(r.terms.pf),
                mark(r.terms.mf),
                mark(r.terms.tl),
            ];
            match &r.outcome {
                SchemeOutcome::Done {
                    miou,
                    pixel_accuracy,
                    tc,
                } => {
                    row.extend([miou, pixel_accuracy, tc].map(|v| format!("{v:.6}")));
                }
                SchemeOutcome::Failed(msg) => {
                    row.extend(["FAILED".to_string(), String::new(), msg.replace(',', ";")]);
                }
            }
            rows.push(row);
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        self.cells().iter().map(|r| r.join(",") + "\n").collect()
    }

    pub fn render(&self) -> String {
        align_table(&self.cells())
    }
}

/// Trains and evaluates each scheme with the same seed, data and teacher.
/// A teacher is trained from `config` when none is supplied and some
/// scheme needs one. Member failures become failure rows.
pub fn run_ablation(
    config: &Config,
    train: &[VideoClip],
    val: &[VideoClip],
    schemes: &[Scheme],
    teacher: Option<&TinyNet>,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let owned;
    let teacher = match teacher {
        Some(t) => t,
        None => {
            progress("training teacher");
            owned = train_teacher(config, train, TrainOptions::default())?
                .checkpoint
                .net;
            &owned
        }
    };
    let mut rows = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        progress(&format!("scheme {scheme} ({})", scheme.terms().label()));
        let mut cfg = config.clone();
        cfg.train.terms = scheme.terms();
        let outcome = train_student(&cfg, train, teacher, TrainOptions::default())
            .and_then(|run| evaluate(&run.checkpoint.net, val))
            .map(|ev| SchemeOutcome::Done {
                miou: ev.report.miou,
                pixel_accuracy: ev.report.pixel_accuracy,
                tc: ev.report.tc,
            })
            .unwrap_or_else(|e| SchemeOutcome::Failed(e.to_string()));
        rows.push(AblationRow {
            scheme,
            terms: scheme.terms(),
            outcome,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_letters_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(&s.to_string()).unwrap(), s);
        }
        assert_eq!(Scheme::J.terms(), TermFlags::ALL);
        assert_eq!(Scheme::A.terms(), TermFlags::NONE);
        assert!(Scheme::parse("k").is_err());
    }
}
