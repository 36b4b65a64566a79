//! ISO PAD metrics from hard decisions.
//!
//! APCER is the fraction of attacks accepted as bonafide, BPCER the
//! fraction of bonafide samples rejected as attacks, ACER their mean, all
//! in percent. Every rate derives from integer confusion counts, so the
//! reports also carry exact rational values; the two-decimal human
//! rendering rounds those rationals half-to-even, which keeps values like
//! a mean of 8.41 and 6.12 at 7.26 instead of drifting to 7.27 through
//! binary floating point.

use std::fmt::Write as _;
use std::path::Path;

use mvanet_core::data::Label;

use crate::error::{Error, Result};

/// Exact non-negative percentage as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    num: i128,
    den: i128,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs().max(1)
}

impl Rational {
    pub fn new(num: i128, den: i128) -> Rational {
        debug_assert!(den > 0 && num >= 0);
        let g = gcd(num, den);
        Rational { num: num / g, den: den / g }
    }

    pub fn add(self, other: Rational) -> Rational {
        Rational::new(self.num * other.den + other.num * self.den, self.den * other.den)
    }

    pub fn div(self, k: i128) -> Rational {
        Rational::new(self.num, self.den * k)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Two-decimal rendering with exact round-half-to-even.
    pub fn fmt2(self) -> String {
        let scaled = self.num * 100;
        let q = scaled / self.den;
        let r = scaled % self.den;
        let q = match (2 * r).cmp(&self.den) {
            std::cmp::Ordering::Less => q,
            std::cmp::Ordering::Greater => q + 1,
            std::cmp::Ordering::Equal => {
                if q % 2 == 0 {
                    q
                } else {
                    q + 1
                }
            }
        };
        format!("{}.{:02}", q / 100, q % 100)
    }
}

/// Confusion counts for the two-class PAD decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub attack_total: u64,
    pub bonafide_total: u64,
    /// Attacks accepted as bonafide.
    pub attack_as_bonafide: u64,
    /// Bonafide samples rejected as attacks.
    pub bonafide_as_attack: u64,
}

impl Counts {
    pub fn from_decisions(decisions: &[(Label, Label)]) -> Counts {
        let mut c = Counts::default();
        for &(label, predicted) in decisions {
            match label {
                Label::Attack => {
                    c.attack_total += 1;
                    if predicted == Label::Bonafide {
                        c.attack_as_bonafide += 1;
                    }
                }
                Label::Bonafide => {
                    c.bonafide_total += 1;
                    if predicted == Label::Attack {
                        c.bonafide_as_attack += 1;
                    }
                }
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.attack_total + self.bonafide_total
    }

    pub fn correct(&self) -> u64 {
        self.total() - self.attack_as_bonafide - self.bonafide_as_attack
    }
}

/// Per-(train, test) evaluation report. Rates are derived from the counts
/// on demand, so `acer == (apcer + bpcer) / 2` holds by construction; a
/// rate whose class is absent from the test set is undefined (`None`).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub train_db: String,
    pub test_db: String,
    pub counts: Counts,
}

impl EvalReport {
    pub fn apcer_exact(&self) -> Option<Rational> {
        (self.counts.attack_total > 0).then(|| {
            Rational::new(
                100 * self.counts.attack_as_bonafide as i128,
                self.counts.attack_total as i128,
            )
        })
    }

    pub fn bpcer_exact(&self) -> Option<Rational> {
        (self.counts.bonafide_total > 0).then(|| {
            Rational::new(
                100 * self.counts.bonafide_as_attack as i128,
                self.counts.bonafide_total as i128,
            )
        })
    }

    pub fn acer_exact(&self) -> Option<Rational> {
        Some(self.apcer_exact()?.add(self.bpcer_exact()?).div(2))
    }

    pub fn accuracy_exact(&self) -> Rational {
        Rational::new(100 * self.counts.correct() as i128, self.counts.total() as i128)
    }

    pub fn apcer(&self) -> Option<f64> {
        self.apcer_exact().map(Rational::to_f64)
    }

    pub fn bpcer(&self) -> Option<f64> {
        self.bpcer_exact().map(Rational::to_f64)
    }

    pub fn acer(&self) -> Option<f64> {
        Some((self.apcer()? + self.bpcer()?) / 2.0)
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy_exact().to_f64()
    }

    pub const CSV_HEADER: &'static str =
        "train_db,test_db,apcer,bpcer,acer,accuracy,n_attack,n_bonafide";

    /// Full-precision CSV row; undefined rates are written as `undefined`.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.train_db,
            self.test_db,
            opt(self.apcer()),
            opt(self.bpcer()),
            opt(self.acer()),
            self.accuracy(),
            self.counts.attack_total,
            self.counts.bonafide_total,
        )
    }

    /// Two-decimal human-readable line, exact rounding.
    pub fn human_line(&self) -> String {
        let opt = |v: Option<Rational>| v.map_or_else(|| "undefined".into(), Rational::fmt2);
        format!(
            "train={} test={} APCER={}% BPCER={}% ACER={}% accuracy={}% (attack={} bonafide={})",
            self.train_db,
            self.test_db,
            opt(self.apcer_exact()),
            opt(self.bpcer_exact()),
            opt(self.acer_exact()),
            self.accuracy_exact().fmt2(),
            self.counts.attack_total,
            self.counts.bonafide_total,
        )
    }
}

/// Builds a report from (ground truth, predicted) pairs.
pub fn compute_metrics(
    decisions: &[(Label, Label)],
    train_db: &str,
    test_db: &str,
) -> Result<EvalReport> {
    if decisions.is_empty() {
        return Err(Error::contract("compute_metrics", "no decisions"));
    }
    Ok(EvalReport {
        train_db: train_db.to_string(),
        test_db: test_db.to_string(),
        counts: Counts::from_decisions(decisions),
    })
}

/// Arithmetic mean of the defined ACERs.
pub fn average_acer(reports: &[EvalReport]) -> Result<f64> {
    let acers: Vec<f64> = reports.iter().filter_map(EvalReport::acer).collect();
    if acers.is_empty() {
        return Err(Error::contract(
            "average_acer",
            "no report with a defined ACER",
        ));
    }
    Ok(acers.iter().sum::<f64>() / acers.len() as f64)
}

/// Exact-rational mean of the defined ACERs.
pub fn average_acer_exact(reports: &[EvalReport]) -> Option<Rational> {
    let acers: Vec<Rational> = reports.iter().filter_map(EvalReport::acer_exact).collect();
    if acers.is_empty() {
        return None;
    }
    let sum = acers.iter().skip(1).fold(acers[0], |a, &b| a.add(b));
    Some(sum.div(acers.len() as i128))
}

/// One persisted per-sample decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub source: String,
    pub label: Label,
    pub predicted: Label,
    /// Softmax probability of the attack class.
    pub score: f64,
}

pub const DECISIONS_HEADER: &str = "path,label,predicted,score";

pub fn write_decisions(path: &Path, decisions: &[Decision]) -> Result<()> {
    let mut out = String::from(DECISIONS_HEADER);
    out.push('\n');
    for d in decisions {
        writeln!(out, "{},{},{},{}", d.source, d.label, d.predicted, d.score).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::Io(path.to_path_buf(), e))
}

pub fn read_decisions(path: &Path) -> Result<Vec<Decision>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    let err = |line: usize, msg: String| Error::Decisions {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DECISIONS_HEADER => {}
        other => {
            return Err(err(
                1,
                format!("bad or missing header (got {:?})", other.map(|(_, h)| h)),
            ))
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err(idx + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let label = Label::parse(fields[1])
            .ok_or_else(|| err(idx + 1, format!("unknown label `{}`", fields[1])))?;
        let predicted = Label::parse(fields[2])
            .ok_or_else(|| err(idx + 1, format!("unknown label `{}`", fields[2])))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| err(idx + 1, format!("bad score `{}`", fields[3])))?;
        out.push(Decision {
            source: fields[0].to_string(),
            label,
            predicted,
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(at: u64, aab: u64, bt: u64, baa: u64) -> EvalReport {
        EvalReport {
            train_db: "T".into(),
            test_db: "E".into(),
            counts: Counts {
                attack_total: at,
                bonafide_total: bt,
                attack_as_bonafide: aab,
                bonafide_as_attack: baa,
            },
        }
    }

    #[test]
    fn published_row_333_891_renders_612() {
        let r = report(10_000, 333, 10_000, 891);
        assert_eq!(r.apcer_exact().unwrap().fmt2(), "3.33");
        assert_eq!(r.bpcer_exact().unwrap().fmt2(), "8.91");
        assert_eq!(r.acer_exact().unwrap().fmt2(), "6.12");
        assert!((r.acer().unwrap() - 6.12).abs() < 1e-12);
    }

    #[test]
    fn published_row_1544_138_renders_841() {
        let r = report(10_000, 1_544, 10_000, 138);
        assert_eq!(r.apcer_exact().unwrap().fmt2(), "15.44");
        assert_eq!(r.bpcer_exact().unwrap().fmt2(), "1.38");
        assert_eq!(r.acer_exact().unwrap().fmt2(), "8.41");
    }

    #[test]
    fn mean_of_841_and_612_renders_726() {
        let a = report(10_000, 1_544, 10_000, 138);
        let b = report(10_000, 333, 10_000, 891);
        let avg = average_acer_exact(&[a, b]).unwrap();
        // 7.265 exactly: banker's rounding keeps the published 7.26
        assert_eq!(avg.fmt2(), "7.26");
        assert!((avg.to_f64() - 7.265).abs() < 1e-12);
    }

    #[test]
    fn all_correct_means_zero_rates_and_full_accuracy() {
        let r = report(50, 0, 50, 0);
        assert_eq!(r.apcer(), Some(0.0));
        assert_eq!(r.bpcer(), Some(0.0));
        assert_eq!(r.acer(), Some(0.0));
        assert_eq!(r.accuracy(), 100.0);
    }

    #[test]
    fn absent_class_is_undefined() {
        let r = report(10, 2, 0, 0);
        assert_eq!(r.apcer_exact().unwrap().fmt2(), "20.00");
        assert!(r.bpcer().is_none());
        assert!(r.acer().is_none());
        assert!(r.csv_row().contains("undefined"));
        assert!(average_acer(&[r]).is_err());
    }

    #[test]
    fn average_acer_single_and_extremes() {
        let single = report(100, 10, 100, 0); // ACER 5
        assert!((average_acer(&[single.clone()]).unwrap() - 5.0).abs() < 1e-12);
        let zero = report(10, 0, 10, 0);
        let hundred = report(10, 10, 10, 10);
        assert!((average_acer(&[zero, hundred]).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_set_accuracy_is_complement_of_acer() {
        let r = report(250, 13, 250, 29);
        let acc = r.accuracy();
        let acer = r.acer().unwrap();
        assert!((acc - (100.0 - acer)).abs() < 1e-9, "{acc} vs {}", 100.0 - acer);
    }

    #[test]
    fn acer_is_exactly_the_mean_of_the_rates() {
        let r = report(333, 17, 777, 41);
        let (a, b, c) = (r.apcer().unwrap(), r.bpcer().unwrap(), r.acer().unwrap());
        assert_eq!(c, (a + b) / 2.0);
    }

    #[test]
    fn decisions_round_trip_and_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let decisions = vec![
            Decision { source: "a.pgm".into(), label: Label::Attack, predicted: Label::Attack, score: 0.91 },
            Decision { source: "b.pgm".into(), label: Label::Bonafide, predicted: Label::Attack, score: 0.75 },
            Decision { source: "c.pgm".into(), label: Label::Bonafide, predicted: Label::Bonafide, score: 0.12 },
        ];
        write_decisions(&p, &decisions).unwrap();
        let back = read_decisions(&p).unwrap();
        assert_eq!(back, decisions);

        let pairs: Vec<(Label, Label)> = back.iter().map(|d| (d.label, d.predicted)).collect();
        let r = compute_metrics(&pairs, "T", "E").unwrap();
        assert_eq!(r.counts.bonafide_as_attack, 1);
        assert_eq!(r.counts.attack_as_bonafide, 0);
        assert_eq!(r.apcer(), Some(0.0));
        assert_eq!(r.bpcer(), Some(50.0));
    }

    #[test]
    fn empty_decisions_error() {
        assert!(compute_metrics(&[], "T", "E").is_err());
    }

    #[test]
    fn fmt2_half_even_both_directions() {
        assert_eq!(Rational::new(7265, 1000).fmt2(), "7.26"); // 7.265 -> even
        assert_eq!(Rational::new(7275, 1000).fmt2(), "7.28"); // 7.275 -> even
        assert_eq!(Rational::new(7276, 1000).fmt2(), "7.28");
        assert_eq!(Rational::new(1, 3).fmt2(), "0.33");
        assert_eq!(Rational::new(2, 3).fmt2(), "0.67");
        assert_eq!(Rational::new(0, 7).fmt2(), "0.00");
        assert_eq!(Rational::new(100, 1).fmt2(), "100.00");
    }
}
