//! Operation ledger: counts every homomorphic primitive by kind, level and
//! pipeline phase, and renders the count and cost tables.
//!
//! A ledger is owned by exactly one worker. Parallel sections fork an empty
//! child per task and merge the children back in order; merging is an
//! entrywise sum, so the result does not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Add,
    Mul,
    CMult,
    Rot,
    Enc,
    Dec,
}

impl OpKind {
    pub const ALL: [OpKind; 6] =
        [OpKind::Add, OpKind::Mul, OpKind::Rot, OpKind::CMult, OpKind::Enc, OpKind::Dec];

    /// Kinds priced by the cost table.
    pub const HOMOMORPHIC: [OpKind; 4] = [OpKind::Add, OpKind::Mul, OpKind::Rot, OpKind::CMult];
}

/// A phase label together with its position in the pipeline, so that two
/// stages with the same display label ("Square" after CL1 and after FL1) stay
/// distinct rows.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Phase {
    pub seq: usize,
    pub label: String,
}

/// Counts in the fixed column order add, mul, rot, cmult, enc, dec.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub add: u64,
    pub mul: u64,
    pub rot: u64,
    pub cmult: u64,
    pub enc: u64,
    pub dec: u64,
}

impl OpCounts {
    pub fn get(&self, kind: OpKind) -> u64 {
        match kind {
            OpKind::Add => self.add,
            OpKind::Mul => self.mul,
            OpKind::Rot => self.rot,
            OpKind::CMult => self.cmult,
            OpKind::Enc => self.enc,
            OpKind::Dec => self.dec,
        }
    }

    fn slot(&mut self, kind: OpKind) -> &mut u64 {
        match kind {
            OpKind::Add => &mut self.add,
            OpKind::Mul => &mut self.mul,
            OpKind::Rot => &mut self.rot,
            OpKind::CMult => &mut self.cmult,
            OpKind::Enc => &mut self.enc,
            OpKind::Dec => &mut self.dec,
        }
    }

    pub fn as_array(&self) -> [u64; 6] {
        [self.add, self.mul, self.rot, self.cmult, self.enc, self.dec]
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|&c| c == 0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpLedger {
    current: Option<Phase>,
    next_seq: usize,
    counts: BTreeMap<(Phase, OpKind, u32), u64>,
}

const UNPHASED: &str = "-";

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a new phase. Subsequent records are attributed to it until the
    /// next call.
    pub fn set_phase(&mut self, label: impl Into<String>) {
        self.current = Some(Phase { seq: self.next_seq, label: label.into() });
        self.next_seq += 1;
    }

    pub fn current_phase(&self) -> Option<&Phase> {
        self.current.as_ref()
    }

    /// An empty ledger recording into the same phase as `self`.
    pub fn fork(&self) -> Self {
        Self { current: self.current.clone(), next_seq: self.next_seq, counts: BTreeMap::new() }
    }

    pub fn record(&mut self, kind: OpKind, level: u32) {
        self.record_n(kind, level, 1);
    }

    pub fn record_n(&mut self, kind: OpKind, level: u32, count: u64) {
        if count == 0 {
            return;
        }
        let phase = self
            .current
            .clone()
            .unwrap_or_else(|| Phase { seq: 0, label: UNPHASED.to_string() });
        *self.counts.entry((phase, kind, level)).or_insert(0) += count;
    }

    pub fn merge(&mut self, other: &OpLedger) {
        for (key, &c) in &other.counts {
            *self.counts.entry(key.clone()).or_insert(0) += c;
        }
        self.next_seq = self.next_seq.max(other.next_seq);
    }

    pub fn merged(mut self, other: &OpLedger) -> OpLedger {
        self.merge(other);
        self
    }

    pub fn count(&self, kind: OpKind) -> u64 {
        self.counts.iter().filter(|((_, k, _), _)| *k == kind).map(|(_, c)| c).sum()
    }

    pub fn count_at(&self, kind: OpKind, level: u32) -> u64 {
        self.counts
            .iter()
            .filter(|((_, k, l), _)| *k == kind && *l == level)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Phase, OpKind, u32, u64)> {
        self.counts.iter().map(|((p, k, l), c)| (p, *k, *l, *c))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn totals(&self) -> OpCounts {
        let mut out = OpCounts::default();
        for ((_, kind, _), c) in &self.counts {
            *out.slot(*kind) += c;
        }
        out
    }

    /// Rows in pipeline order.
    pub fn by_phase(&self) -> Vec<(Phase, OpCounts)> {
        let mut rows: BTreeMap<Phase, OpCounts> = BTreeMap::new();
        for ((phase, kind, _), c) in &self.counts {
            *rows.entry(phase.clone()).or_default().slot(*kind) += c;
        }
        rows.into_iter().collect()
    }

    /// Rows from the highest level down.
    pub fn by_level(&self) -> Vec<(u32, OpCounts)> {
        let mut rows: BTreeMap<u32, OpCounts> = BTreeMap::new();
        for ((_, kind, level), c) in &self.counts {
            *rows.entry(*level).or_default().slot(*kind) += c;
        }
        rows.into_iter().rev().collect()
    }

    pub fn phase_counts(&self, label: &str) -> Vec<OpCounts> {
        self.by_phase().into_iter().filter(|(p, _)| p.label == label).map(|(_, c)| c).collect()
    }

    pub fn level_counts(&self, level: u32) -> OpCounts {
        self.by_level().into_iter().find(|(l, _)| *l == level).map(|(_, c)| c).unwrap_or_default()
    }

    pub fn report(&self, grouping: Grouping) -> Result<CountTable> {
        let integer_row = |label: String, c: &OpCounts| TableRow {
            label,
            values: c.as_array().map(|v| v as f64),
        };
        let table = match grouping {
            Grouping::ByPhase => CountTable {
                header: "phase".into(),
                decimals: 0,
                rows: self.by_phase().iter().map(|(p, c)| integer_row(p.label.clone(), c)).collect(),
            },
            Grouping::ByLevel => CountTable {
                header: "level".into(),
                decimals: 0,
                rows: self.by_level().iter().map(|(l, c)| integer_row(l.to_string(), c)).collect(),
            },
            Grouping::Totals => CountTable {
                header: "phase".into(),
                decimals: 0,
                rows: vec![integer_row("Total".into(), &self.totals())],
            },
            Grouping::Amortized(n) => {
                if n == 0 {
                    return Err(Error::InvalidParameter("amortization needs n >= 1".into()));
                }
                let t = self.totals();
                CountTable {
                    header: "phase".into(),
                    decimals: 1,
                    rows: vec![TableRow {
                        label: "Amortized".into(),
                        values: t.as_array().map(|v| v as f64 / n as f64),
                    }],
                }
            }
        };
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    ByPhase,
    ByLevel,
    Totals,
    Amortized(usize),
}

pub const CSV_HEADER_COLUMNS: [&str; 6] = ["add", "mul", "rot", "cmult", "enc", "dec"];

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub values: [f64; 6],
}

/// A rendered count table. Integer tables carry `decimals == 0`; amortized
/// tables keep the exact ratios internally and render one decimal.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub header: String,
    pub decimals: usize,
    pub rows: Vec<TableRow>,
}

impl CountTable {
    fn cell(&self, v: f64) -> String {
        format!("{:.*}", self.decimals, v)
    }

    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut head = vec![self.header.clone()];
        head.extend(CSV_HEADER_COLUMNS.iter().map(|s| s.to_string()));
        cells.push(head);
        for row in &self.rows {
            let mut line = vec![row.label.clone()];
            line.extend(row.values.iter().map(|&v| self.cell(v)));
            cells.push(line);
        }
        let widths: Vec<usize> =
            (0..7).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in &cells {
            let _ = write!(out, "{:<w$}", line[0], w = widths[0]);
            for (c, cell) in line.iter().enumerate().skip(1) {
                let _ = write!(out, "  {:>w$}", cell, w = widths[c]);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase/level,add,mul,rot,cmult,enc,dec\n");
        for row in &self.rows {
            out.push_str(&csv_escape(&row.label));
            for &v in &row.values {
                out.push(',');
                out.push_str(&self.cell(v));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV produced by [`CountTable::to_csv`]. The header label is
    /// not stored in the CSV, so the caller supplies it.
    pub fn from_csv(text: &str, header: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("phase/level,add,mul,rot,cmult,enc,dec") => {}
            other => return Err(Error::Parse(format!("unexpected CSV header {other:?}"))),
        }
        let mut rows = Vec::new();
        let mut decimals = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (label, rest) = split_label(line)?;
            let fields: Vec<&str> = rest.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Parse(format!("expected 6 numeric columns in {line:?}")));
            }
            let mut values = [0.0; 6];
            for (slot, f) in values.iter_mut().zip(&fields) {
                if let Some(dot) = f.find('.') {
                    decimals = decimals.max(f.len() - dot - 1);
                }
                *slot = f.parse().map_err(|_| Error::Parse(format!("bad number {f:?}")))?;
            }
            rows.push(TableRow { label, values });
        }
        Ok(CountTable { header: header.to_string(), decimals, rows })
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_label(line: &str) -> Result<(String, &str)> {
    if let Some(stripped) = line.strip_prefix('"') {
        let mut label = String::new();
        let mut chars = stripped.char_indices().peekable();
        while let Some((i, ch)) = chars.next() {
            if ch == '"' {
                if matches!(chars.peek(), Some((_, '"'))) {
                    label.push('"');
                    chars.next();
                } else {
                    let rest = &stripped[i + 1..];
                    let rest = rest
                        .strip_prefix(',')
                        .ok_or_else(|| Error::Parse(format!("malformed row {line:?}")))?;
                    return Ok((label, rest));
                }
            } else {
                label.push(ch);
            }
        }
        Err(Error::Parse(format!("unterminated quote in {line:?}")))
    } else {
        let (label, rest) =
            line.split_once(',').ok_or_else(|| Error::Parse(format!("malformed row {line:?}")))?;
        Ok((label.to_string(), rest))
    }
}

/// Per-(kind, level) cost in microseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    cost_us: BTreeMap<(OpKind, u32), f64>,
}

/// Measured costs at N=16384, levels 2..=11, columns (⊕, ⊗, Rot, CMult).
const MEASURED_US: [(u32, [f64; 4]); 10] = [
    (2, [93.0, 6434.0, 4542.0, 1645.0]),
    (3, [127.0, 10106.0, 7311.0, 2467.0]),
    (4, [172.0, 14466.0, 10719.0, 3273.0]),
    (5, [209.0, 19757.0, 14995.0, 4137.0]),
    (6, [253.0, 25931.0, 20057.0, 5018.0]),
    (7, [298.0, 33139.0, 25916.0, 5935.0]),
    (8, [345.0, 39953.0, 31722.0, 6741.0]),
    (9, [397.0, 49835.0, 40167.0, 7942.0]),
    (10, [443.0, 57791.0, 47144.0, 8731.0]),
    (11, [498.0, 68374.0, 56366.0, 9895.0]),
];

#[derive(Debug, Deserialize)]
struct CostFile {
    level: Vec<CostFileRow>,
}

#[derive(Debug, Deserialize)]
struct CostFileRow {
    level: u32,
    add: f64,
    mul: f64,
    rot: f64,
    cmult: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        Self::measured()
    }
}

impl CostTable {
    pub fn empty() -> Self {
        Self { cost_us: BTreeMap::new() }
    }

    /// The measured table, extended to level 1 by linear extrapolation from
    /// levels 2 and 3 (no level-1 measurement exists, but the last FC layer of
    /// a tight budget runs there).
    pub fn measured() -> Self {
        let mut t = Self::empty();
        for (level, row) in MEASURED_US {
            t.set_row(level, row);
        }
        let (l2, l3) = (MEASURED_US[0].1, MEASURED_US[1].1);
        t.set_row(1, std::array::from_fn(|i| 2.0 * l2[i] - l3[i]));
        t
    }

    fn set_row(&mut self, level: u32, row: [f64; 4]) {
        for (kind, cost) in OpKind::HOMOMORPHIC.into_iter().zip(row) {
            self.cost_us.insert((kind, level), cost);
        }
    }

    pub fn set(&mut self, kind: OpKind, level: u32, cost_us: f64) -> Result<()> {
        if !OpKind::HOMOMORPHIC.contains(&kind) {
            return Err(Error::InvalidParameter(format!("{kind:?} is not priced")));
        }
        if cost_us.is_nan() || cost_us <= 0.0 {
            return Err(Error::InvalidParameter(format!("cost must be positive, got {cost_us}")));
        }
        self.cost_us.insert((kind, level), cost_us);
        Ok(())
    }

    pub fn get(&self, kind: OpKind, level: u32) -> Option<f64> {
        self.cost_us.get(&(kind, level)).copied()
    }

    pub fn levels(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.cost_us.keys().map(|(_, l)| *l).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Parses a TOML table of `[[level]]` rows with fields
    /// `level, add, mul, rot, cmult`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: CostFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut t = Self::empty();
        for row in file.level {
            t.set(OpKind::Add, row.level, row.add)?;
            t.set(OpKind::Mul, row.level, row.mul)?;
            t.set(OpKind::Rot, row.level, row.rot)?;
            t.set(OpKind::CMult, row.level, row.cmult)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for level in self.levels() {
            let g = |k| self.get(k, level).unwrap_or(0.0);
            let _ = writeln!(
                out,
                "[[level]]\nlevel = {level}\nadd = {:?}\nmul = {:?}\nrot = {:?}\ncmult = {:?}\n",
                g(OpKind::Add),
                g(OpKind::Mul),
                g(OpKind::Rot),
                g(OpKind::CMult)
            );
        }
        out
    }
}

/// Σ count(kind, level) × cost(kind, level) over ⊕, ⊗, Rot and CMult.
pub fn estimate_time(ledger: &OpLedger, costs: &CostTable) -> Result<f64> {
    let mut total = 0.0;
    for (_, kind, level, count) in ledger.entries() {
        if matches!(kind, OpKind::Enc | OpKind::Dec) {
            continue;
        }
        let c = costs.get(kind, level).ok_or(Error::MissingCost { kind, level })?;
        total += c * count as f64;
    }
    Ok(total)
}

/// Estimated microseconds per phase, in pipeline order.
pub fn estimate_by_phase(ledger: &OpLedger, costs: &CostTable) -> Result<Vec<(String, f64)>> {
    let mut rows: BTreeMap<Phase, f64> = BTreeMap::new();
    for (phase, kind, level, count) in ledger.entries() {
        if matches!(kind, OpKind::Enc | OpKind::Dec) {
            continue;
        }
        let c = costs.get(kind, level).ok_or(Error::MissingCost { kind, level })?;
        *rows.entry(phase.clone()).or_insert(0.0) += c * count as f64;
    }
    Ok(rows.into_iter().map(|(p, t)| (p.label, t)).collect())
}

pub fn estimate_by_level(ledger: &OpLedger, costs: &CostTable) -> Result<Vec<(u32, f64)>> {
    let mut rows: BTreeMap<u32, f64> = BTreeMap::new();
    for (_, kind, level, count) in ledger.entries() {
        if matches!(kind, OpKind::Enc | OpKind::Dec) {
            continue;
        }
        let c = costs.get(kind, level).ok_or(Error::MissingCost { kind, level })?;
        *rows.entry(level).or_insert(0.0) += c * count as f64;
    }
    Ok(rows.into_iter().rev().collect())
}
