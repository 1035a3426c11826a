//! Report emission: CSV series, JSON lines, text tables and run manifests.
//!
//! Numbers are printed with 9 significant digits; every file ends with a
//! newline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::config::{DemandMode, Scheme};
use crate::sim::{Fig5aTable, Fig5bTable, SimReport, FIG5A_REFERENCE_PCT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    JsonLines,
    Table,
}

/// `%.9g`-style formatting.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn fig5a_csv(table: &Fig5aTable, mode: DemandMode) -> String {
    let mut out = String::from("vmu_index,frequency,scheme,utility,seed\n");
    for r in &table.rows {
        let u = match mode {
            DemandMode::Realized => r.realized,
            DemandMode::Expected => r.expected,
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.vmu_index,
            fmt_num(r.frequency),
            r.scheme,
            fmt_num(u),
            r.seed
        );
    }
    out
}

pub fn fig5b_csv(table: &Fig5bTable, mode: DemandMode) -> String {
    let mut out = String::from("group,beta,global_utility,seed\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.group,
            fmt_num(r.beta),
            fmt_num(r.global(mode)),
            r.seed
        );
    }
    out
}

pub fn timelines_csv(report: &SimReport) -> String {
    let mut out = String::from("vmu_index,time,entropy\n");
    for (i, tl) in report.timelines.iter().enumerate() {
        for &(t, h) in tl {
            let _ = writeln!(out, "{i},{},{}", fmt_num(t), fmt_num(h));
        }
    }
    out
}

pub fn vmus_csv(report: &SimReport) -> String {
    let mut out = String::from(
        "vmu_index,frequency,p,avg_entropy,demand,allocation,served,shortage,leftover,realized_utility,expected_utility,scheme,seed\n",
    );
    for v in &report.vmus {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            v.index,
            fmt_num(v.frequency),
            fmt_num(v.p),
            fmt_num(v.avg_entropy),
            v.demand,
            v.allocation,
            v.served,
            v.shortage,
            v.leftover,
            fmt_num(v.realized_utility),
            fmt_num(v.expected_utility),
            report.header.scheme,
            report.header.master_seed
        );
    }
    out
}

/// The whole report as one JSON line.
pub fn report_jsonl(report: &SimReport) -> String {
    let mut s = serde_json::to_string(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_report_jsonl(text: &str) -> Result<SimReport, serde_json::Error> {
    serde_json::from_str(text.trim_end_matches('\n'))
}

pub fn report_table(report: &SimReport) -> String {
    let h = &report.header;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {}  seed={}  mode={:?}  scheme={}  solver={:?}",
        h.tool, h.version, h.master_seed, h.mode, h.scheme, h.solver
    );
    let _ = writeln!(out, "rng: {}  hash: {}", h.rng_algorithm, h.hash_algorithm);
    let _ = writeln!(out, "budget: {}", report.budget);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>3} {:>6} {:>8} {:>8} {:>6} {:>6} {:>6} {:>12} {:>12}",
        "vmu", "freq", "p", "H_avg", "demand", "alloc", "served", "realized", "expected"
    );
    for v in &report.vmus {
        let _ = writeln!(
            out,
            "{:>3} {:>6} {:>8} {:>8} {:>6} {:>6} {:>6} {:>12} {:>12}",
            v.index,
            fmt_num(v.frequency),
            fmt_num(v.p),
            fmt_num(v.avg_entropy),
            v.demand,
            v.allocation,
            v.served,
            fmt_num(v.realized_utility),
            fmt_num(v.expected_utility)
        );
    }
    let _ = writeln!(out);
    for s in &report.schemes {
        let _ = writeln!(
            out,
            "{:<10} mean realized {:>12}  mean expected {:>12}{}",
            s.scheme.name(),
            fmt_num(s.mean_realized),
            fmt_num(s.mean_expected),
            if s.simulated { "  (simulated)" } else { "" }
        );
    }
    let _ = writeln!(out);
    for a in &report.tracking {
        let _ = writeln!(out, "attacker {:<10} mean tracked fraction {}", a.name, fmt_num(a.mean));
    }
    let inv = &report.invariants;
    let _ = writeln!(
        out,
        "ledger: {} blocks, head {}\ninvariants: {} audits, {} one-active checks, synchrony {}, migration mismatches {}",
        report.ledger.blocks, report.ledger.head, inv.audits, inv.one_active_checks, inv.synchrony_holds, inv.migration_mismatches
    );
    out
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.1}%"))
}

pub fn fig5a_text(table: &Fig5aTable) -> String {
    let mut out = String::new();
    let m = table.vmu_count();
    let n = table.seeds.len().max(1) as f64;
    let _ = writeln!(
        out,
        "Per-VMU mean utility over {} seeds (beta = {})",
        table.seeds.len(),
        fmt_num(table.beta)
    );
    let _ = writeln!(
        out,
        "{:>3} {:>6} {:>14} {:>14} {:>14} {:>14}",
        "vmu", "freq", "on_demand(re)", "equal(re)", "on_demand(ex)", "equal(ex)"
    );
    for i in 0..m {
        let freq = table
            .rows
            .iter()
            .find(|r| r.vmu_index == i)
            .map_or(0.0, |r| r.frequency);
        let avg = |scheme: Scheme, mode: DemandMode| {
            table
                .seeds
                .iter()
                .filter_map(|s| table.utility(s.seed, i, scheme, mode))
                .sum::<f64>()
                / n
        };
        let _ = writeln!(
            out,
            "{:>3} {:>6} {:>14} {:>14} {:>14} {:>14}",
            i,
            fmt_num(freq),
            fmt_num(avg(Scheme::OnDemand, DemandMode::Realized)),
            fmt_num(avg(Scheme::Equal, DemandMode::Realized)),
            fmt_num(avg(Scheme::OnDemand, DemandMode::Expected)),
            fmt_num(avg(Scheme::Equal, DemandMode::Expected))
        );
    }
    for mode in [DemandMode::Realized, DemandMode::Expected] {
        let per_seed: Vec<f64> = table.seeds.iter().filter_map(|s| s.improvement(mode)).collect();
        let lo = per_seed.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "improvement ({}): {}  reference: {:.1}%  per-seed range [{}, {}]  per-VMU dominance in {} of seeds",
            if mode == DemandMode::Realized {
                "realized"
            } else {
                "expected"
            },
            pct(table.improvement(mode)),
            FIG5A_REFERENCE_PCT,
            pct(lo.is_finite().then_some(lo)),
            pct(hi.is_finite().then_some(hi)),
            pct(Some(100.0 * table.per_vmu_dominance(mode)))
        );
    }
    out
}

pub fn fig5b_text(table: &Fig5bTable) -> String {
    let mut out = String::new();
    let betas = table.betas();
    for mode in [DemandMode::Expected, DemandMode::Realized] {
        let _ = writeln!(
            out,
            "Global on-demand utility per group ({}; mean over {} seeds)",
            if mode == DemandMode::Realized {
                "realized"
            } else {
                "expected"
            },
            table.seeds().len()
        );
        let _ = write!(out, "{:>6}", "group");
        for b in &betas {
            let _ = write!(out, " {:>12}", format!("beta={}", fmt_num(*b)));
        }
        let _ = writeln!(out);
        for (g, row) in table.means(mode).iter().enumerate() {
            let _ = write!(out, "{:>6}", g + 1);
            for v in row {
                let _ = write!(out, " {:>12}", fmt_num(*v));
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out, "ordered cells: {}", pct(Some(100.0 * table.ordering_rate(mode))));
        let _ = writeln!(out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_echo: String,
    pub seeds: Vec<u64>,
    /// Where the master seed came from: `config`, `flag` or `env`.
    pub seed_source: String,
    pub outputs: Vec<ManifestEntry>,
    /// Hash of the primary report file.
    pub report_sha256: String,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn verify_report(&self, bytes: &[u8]) -> bool {
        sha256_hex(bytes) == self.report_sha256
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.625), "0.625");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_num(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_num(123456789.0), "123456789");
        assert_eq!(fmt_num(1234567891.0), "1.23456789e+09");
        assert_eq!(fmt_num(0.00001234), "1.234e-05");
        assert_eq!(fmt_num(0.0001234), "0.0001234");
        assert_eq!(fmt_num(33.8), "33.8");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
