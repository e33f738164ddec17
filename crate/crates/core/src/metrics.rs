//! Human-normalized Atari scores and their aggregates.
//!
//! All scores are percentages: an HNS of 100 means human-average play.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{GdiError, Result};
use crate::util::{mean, median};

/// Frames counted per day of equivalent human play.
const FRAMES_PER_DAY: f64 = 108_000.0 * 2.0 * 24.0;

pub const SCORE_HEADER: [&str; 5] = ["game", "random", "human_avg", "hwr", "score"];
pub const SABER_CAP: f64 = 200.0;

fn normalized(raw: f64, random: f64, baseline: f64, what: &str) -> Result<f64> {
    if baseline == random {
        return Err(GdiError::InvalidArgument(format!("{what} baseline equals the random score")));
    }
    Ok(100.0 * (raw - random) / (baseline - random))
}

pub fn hns(raw: f64, random: f64, human_avg: f64) -> Result<f64> {
    normalized(raw, random, human_avg, "human average")
}

pub fn hwrns(raw: f64, random: f64, hwr: f64) -> Result<f64> {
    normalized(raw, random, hwr, "world record")
}

pub fn saber(hwrns_percent: f64) -> f64 {
    hwrns_percent.clamp(0.0, SABER_CAP)
}

/// Mean and median over the present values.
pub fn aggregate(values: &[Option<f64>]) -> Result<(f64, f64)> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(GdiError::InvalidArgument("no values to aggregate".into()));
    }
    Ok((mean(&present), median(&present)))
}

pub fn playtime_days(frames: f64) -> f64 {
    frames / FRAMES_PER_DAY
}

pub fn learning_efficiency(metric: f64, frames: f64) -> Result<f64> {
    if !(frames > 0.0) {
        return Err(GdiError::InvalidArgument(format!("frames {frames}")));
    }
    Ok(metric / frames)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub game: String,
    pub random: f64,
    pub human_avg: f64,
    pub hwr: f64,
    /// `None` when the algorithm has no score for this game.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn get(&self, game: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.game == game)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(GdiError::ScoreTable("empty file".into())),
        };
        if header.iter().ne(SCORE_HEADER) {
            return Err(GdiError::ScoreTable(format!("expected header {}", SCORE_HEADER.join(","))));
        }
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != SCORE_HEADER.len() {
                return Err(GdiError::ScoreTable(format!("line {line}: expected {} fields", SCORE_HEADER.len())));
            }
            let field = |k: usize| -> Result<Option<f64>> {
                let s = &rec[k];
                if s == "NA" {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(Some)
                    .ok_or_else(|| GdiError::ScoreTable(format!("line {line}: bad {} value {s:?}", SCORE_HEADER[k])))
            };
            let required = |k: usize| -> Result<f64> {
                field(k)?.ok_or_else(|| GdiError::ScoreTable(format!("line {line}: {} may not be NA", SCORE_HEADER[k])))
            };
            let game = rec[0].to_string();
            if game.is_empty() {
                return Err(GdiError::ScoreTable(format!("line {line}: empty game name")));
            }
            if !seen.insert(game.clone()) {
                return Err(GdiError::ScoreTable(format!("duplicate game {game}")));
            }
            let row = ScoreRow { game, random: required(1)?, human_avg: required(2)?, hwr: required(3)?, score: field(4)? };
            if row.score.is_some() && (row.human_avg == row.random || row.hwr == row.random) {
                return Err(GdiError::ScoreTable(format!("line {line}: baseline equals the random score")));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(GdiError::ScoreTable("no rows".into()));
        }
        Ok(Self { rows })
    }
}

pub fn load_score_table(path: impl AsRef<Path>) -> Result<ScoreTable> {
    ScoreTable::from_reader(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bundled {
    GdiI3,
    GdiH3,
}

impl Bundled {
    pub fn scores_csv(self) -> &'static str {
        match self {
            Bundled::GdiI3 => include_str!("../fixtures/gdi_i3_scores.csv"),
            Bundled::GdiH3 => include_str!("../fixtures/gdi_h3_scores.csv"),
        }
    }

    /// Published per-game normalized scores, header `game,hns,hwrns,saber`.
    pub fn printed_csv(self) -> &'static str {
        match self {
            Bundled::GdiI3 => include_str!("../fixtures/gdi_i3_printed.csv"),
            Bundled::GdiH3 => include_str!("../fixtures/gdi_h3_printed.csv"),
        }
    }

    pub fn table(self) -> ScoreTable {
        ScoreTable::from_reader(self.scores_csv().as_bytes()).expect("bundled table parses")
    }

    pub fn printed(self) -> Vec<GameScores> {
        let mut rdr = csv::Reader::from_reader(self.printed_csv().as_bytes());
        rdr.records()
            .map(|r| {
                let r = r.expect("bundled table parses");
                let num = |k: usize| r[k].parse::<f64>().ok();
                GameScores { game: r[0].to_string(), hns: num(1), hwrns: num(2), saber: num(3) }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameScores {
    pub game: String,
    pub hns: Option<f64>,
    pub hwrns: Option<f64>,
    pub saber: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub games: usize,
    pub mean_hns: f64,
    pub median_hns: f64,
    pub mean_hwrns: f64,
    pub median_hwrns: f64,
    pub mean_saber: f64,
    pub median_saber: f64,
    pub hwrb: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub rows: Vec<GameScores>,
    pub summary: Summary,
}

pub fn score_report(table: &ScoreTable) -> Result<ScoreReport> {
    let mut rows = Vec::with_capacity(table.len());
    for r in &table.rows {
        let (hns, hwrns) = match r.score {
            Some(s) => (Some(hns(s, r.random, r.human_avg)?), Some(hwrns(s, r.random, r.hwr)?)),
            None => (None, None),
        };
        rows.push(GameScores { game: r.game.clone(), hns, hwrns, saber: hwrns.map(saber) });
    }
    let col = |f: fn(&GameScores) -> Option<f64>| rows.iter().map(f).collect::<Vec<_>>();
    let (mean_hns, median_hns) = aggregate(&col(|r| r.hns))?;
    let (mean_hwrns, median_hwrns) = aggregate(&col(|r| r.hwrns))?;
    let (mean_saber, median_saber) = aggregate(&col(|r| r.saber))?;
    let summary = Summary {
        games: rows.iter().filter(|r| r.hns.is_some()).count(),
        mean_hns,
        median_hns,
        mean_hwrns,
        median_hwrns,
        mean_saber,
        median_saber,
        hwrb: rows.iter().filter(|r| r.hwrns.is_some_and(|v| v >= 100.0)).count(),
    };
    Ok(ScoreReport { rows, summary })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

/// Per-game rows followed by `mean` and `median` summary rows.
pub fn write_report_csv<W: Write>(report: &ScoreReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["game", "hns", "hwrns", "saber"])?;
    for r in &report.rows {
        w.write_record([r.game.clone(), cell(r.hns), cell(r.hwrns), cell(r.saber)])?;
    }
    let s = &report.summary;
    w.write_record(["mean".to_string(), cell(Some(s.mean_hns)), cell(Some(s.mean_hwrns)), cell(Some(s.mean_saber))])?;
    w.write_record(["median".to_string(), cell(Some(s.median_hns)), cell(Some(s.median_hwrns)), cell(Some(s.median_saber))])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalized_score_examples() {
        assert_abs_diff_eq!(hns(48735.0, 227.8, 7127.8).unwrap(), 703.00, epsilon = 0.005);
        assert_eq!(hns(5.0, 5.0, 9.0).unwrap(), 0.0);
        assert_abs_diff_eq!(hns(100.0, 0.1, 12.1).unwrap(), 832.50, epsilon = 0.005);
        assert!(hns(1.0, 2.0, 2.0).is_err());
        assert_abs_diff_eq!(hwrns(100.0, 0.1, 100.0).unwrap(), 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hwrns(3837300.0, 12850.0, 10604840.0).unwrap(), 36.11, epsilon = 0.005);
        assert_abs_diff_eq!(hwrns(7.0, 1.0, 7.0).unwrap(), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn saber_examples() {
        assert_eq!(saber(1150.59), 200.0);
        assert_eq!(saber(-93.09), 0.0);
        assert_eq!(saber(50.0), 50.0);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[Some(4.5)]).unwrap(), (4.5, 4.5));
        assert_eq!(aggregate(&[Some(1.0), None, Some(3.0)]).unwrap(), (2.0, 2.0));
        assert!(aggregate(&[None, None]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn playtime_and_efficiency() {
        assert_abs_diff_eq!(playtime_days(2e8), 38.58, epsilon = 0.005);
        assert_eq!(playtime_days(0.0), 0.0);
        assert_abs_diff_eq!(playtime_days(1e11), 19290.1, epsilon = 0.05);
        assert_eq!(learning_efficiency(0.0, 2e8).unwrap(), 0.0);
        assert_abs_diff_eq!(learning_efficiency(9620.33, 2e8).unwrap(), 4.8102e-5, epsilon = 1e-9);
        assert_eq!(learning_efficiency(3.0, 1e6).unwrap() * 0.5, learning_efficiency(3.0, 2e6).unwrap());
        assert!(learning_efficiency(1.0, 0.0).is_err());
    }

    #[test]
    fn table_parsing() {
        assert!(matches!(ScoreTable::from_reader(&b""[..]), Err(GdiError::ScoreTable(_))));
        let t = ScoreTable::from_reader(&b"game,random,human_avg,hwr,score\nA,0,10,100,NA\nB,0,10,100,20\n"[..]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("A").unwrap().score, None);
        let rep = score_report(&t).unwrap();
        assert_eq!(rep.summary.games, 1);
        assert_eq!(rep.summary.mean_hns, 200.0);
        let dup = b"game,random,human_avg,hwr,score\nA,0,10,100,1\nA,0,10,100,2\n";
        assert!(ScoreTable::from_reader(&dup[..]).is_err());
        assert!(ScoreTable::from_reader(&b"game,random,human,hwr,score\nA,0,10,100,1\n"[..]).is_err());
        assert!(ScoreTable::from_reader(&b"game,random,human_avg,hwr,score\nA,0,x,100,1\n"[..]).is_err());
        assert!(ScoreTable::from_reader(&b"game,random,human_avg,hwr,score\nA,0,0,100,1\n"[..]).is_err());
        assert!(ScoreTable::from_reader(&b"game,random,human_avg,hwr,score\nA,0,10,100\n"[..]).is_err());
    }

    #[test]
    fn bundled_tables_load() {
        for b in [Bundled::GdiI3, Bundled::GdiH3] {
            assert_eq!(b.table().len(), 57);
            assert_eq!(b.printed().len(), 57);
        }
        let h3 = Bundled::GdiH3.table();
        let alien = h3.get("Alien").unwrap();
        assert_abs_diff_eq!(hns(alien.score.unwrap(), alien.random, alien.human_avg).unwrap(), 703.00, epsilon = 0.005);
    }

    #[test]
    fn report_csv_layout() {
        let t = ScoreTable::from_reader(&b"game,random,human_avg,hwr,score\nA,0,10,100,NA\nB,0,10,100,20\n"[..]).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&score_report(&t).unwrap(), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "game,hns,hwrns,saber\nA,NA,NA,NA\nB,200.00,20.00,20.00\nmean,200.00,20.00,20.00\nmedian,200.00,20.00,20.00\n"
        );
    }

    proptest! {
        #[test]
        fn hns_affine_invariant(raw in -1e4f64..1e4, random in -1e3f64..1e3, gap in 1.0f64..1e4, c in -1e3f64..1e3, k in 0.1f64..10.0) {
            let base = hns(raw, random, random + gap).unwrap();
            let shifted = hns(raw + c, random + c, random + gap + c).unwrap();
            let scaled = hwrns(raw * k, random * k, (random + gap) * k).unwrap();
            prop_assert!((base - shifted).abs() <= 1e-9 * base.abs().max(1.0));
            prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn saber_idempotent(v in -1e4f64..1e4) {
            prop_assert_eq!(saber(saber(v)), saber(v));
        }

        #[test]
        fn aggregate_permutation_and_na_invariant(mut xs in prop::collection::vec(-1e3f64..1e3, 1..20), seed in any::<u64>()) {
            let base = aggregate(&xs.iter().copied().map(Some).collect::<Vec<_>>()).unwrap();
            let mut with_na: Vec<Option<f64>> = Vec::new();
            let n = xs.len();
            xs.rotate_left((seed % n as u64) as usize);
            for (i, x) in xs.iter().enumerate() {
                if (seed >> (i % 64)) & 1 == 1 {
                    with_na.push(None);
                }
                with_na.push(Some(*x));
            }
            let other = aggregate(&with_na).unwrap();
            prop_assert!((base.0 - other.0).abs() < 1e-9);
            prop_assert_eq!(base.1, other.1);
        }
    }
}
