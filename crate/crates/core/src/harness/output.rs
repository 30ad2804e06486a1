//! CSV emission, summary re-loading, text tables and subject-level input.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::metrics::{MethodId, ReplicateRow, SummaryRow};
use crate::propensity::CovSet;
use crate::trialdata::{SubjectRecord, TrialDataset, N_COVARIATES};

pub const RAW_HEADER: [&str; 10] =
    ["scenario_id", "replicate", "method_id", "covset", "hyperparam", "estimate", "se", "reject", "essr_pct", "flags"];

pub const SUMMARY_HEADER: [&str; 12] = [
    "scenario_id",
    "method_id",
    "covset",
    "hyperparam",
    "bias",
    "rel_bias_pct",
    "type1_or_power",
    "mean_se",
    "essr_pct",
    "essr_empirical_pct",
    "n_used",
    "n_failed",
];

pub const RAW_FILE: &str = "raw.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn covset_label(c: Option<CovSet>) -> String {
    c.map_or_else(|| "none".to_string(), |c| c.id().to_string())
}

/// Writes raw replicate rows; pass `header = false` to append further
/// scenarios to the same stream.
pub fn write_raw<W: Write>(out: W, rows: &[ReplicateRow], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(RAW_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.replicate.to_string(),
            r.key.method.to_string(),
            covset_label(r.key.covset),
            r.key.hyperparam.clone(),
            r.estimate.to_string(),
            r.se.to_string(),
            u8::from(r.reject).to_string(),
            r.essr_pct.to_string(),
            r.flags.join("|"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(SUMMARY_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.method.to_string(),
            covset_label(r.covset),
            r.hyperparam.clone(),
            r.bias.to_string(),
            r.rel_bias_pct.map_or_else(String::new, |v| v.to_string()),
            r.type1_or_power.to_string(),
            r.mean_se.to_string(),
            r.essr_pct.to_string(),
            r.essr_empirical_pct.to_string(),
            r.n_used.to_string(),
            r.n_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, headers: &csv::StringRecord, name: &str, line: u64) -> Result<&'a str> {
    let i = headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::InvalidInput(format!("missing column `{name}`")))?;
    rec.get(i)
        .map(str::trim)
        .ok_or_else(|| Error::InvalidInput(format!("line {line}: missing value for `{name}`")))
}

fn number<T: std::str::FromStr>(s: &str, name: &str, line: u64) -> Result<T> {
    s.parse()
        .map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse `{s}` in column `{name}`")))
}

/// Reads a summary CSV written by [`write_summary`].
pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let f = |name: &str| field(&rec, &headers, name, line);
        let covset = match f("covset")? {
            "none" | "" => None,
            s => Some(s.parse::<CovSet>()?),
        };
        let rb = f("rel_bias_pct")?;
        out.push(SummaryRow {
            scenario_id: f("scenario_id")?.to_string(),
            method: f("method_id")?.parse::<MethodId>()?,
            covset,
            hyperparam: f("hyperparam")?.to_string(),
            bias: number(f("bias")?, "bias", line)?,
            rel_bias_pct: if rb.is_empty() { None } else { Some(number(rb, "rel_bias_pct", line)?) },
            type1_or_power: number(f("type1_or_power")?, "type1_or_power", line)?,
            mean_se: number(f("mean_se")?, "mean_se", line)?,
            essr_pct: number(f("essr_pct")?, "essr_pct", line)?,
            essr_empirical_pct: number(f("essr_empirical_pct")?, "essr_empirical_pct", line)?,
            n_used: number(f("n_used")?, "n_used", line)?,
            n_failed: number(f("n_failed")?, "n_failed", line)?,
        });
    }
    Ok(out)
}

/// Reads subject-level data with columns
/// `id,x1,...,x6,treated,trial,y`; `trial` is 0 for the concurrent study
/// and 1..=k for historical studies, `treated` is 0/1 or true/false.
pub fn read_subjects<R: Read>(input: R) -> Result<TrialDataset> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let mut subjects = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let f = |name: &str| field(&rec, &headers, name, line);
        let mut x = [0.0; N_COVARIATES];
        for (j, v) in x.iter_mut().enumerate() {
            let name = format!("x{}", j + 1);
            *v = number(f(&name)?, &name, line)?;
        }
        let treated = match f("treated")? {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            other => return Err(Error::InvalidInput(format!("line {line}: `treated` must be 0/1, got `{other}`"))),
        };
        subjects.push(SubjectRecord {
            id: number(f("id")?, "id", line)?,
            x,
            treated,
            trial: number(f("trial")?, "trial", line)?,
            y: number(f("y")?, "y", line)?,
        });
    }
    if subjects.is_empty() {
        return Err(Error::InvalidInput("subject file has no rows".to_string()));
    }
    TrialDataset::from_subjects(subjects)
}

/// Display position of a method within the rendered tables.
fn table_rank(m: MethodId) -> usize {
    match m {
        MethodId::UnadjRc => 0,
        MethodId::UnadjFc => 1,
        MethodId::Map => 2,
        MethodId::MmNc => 3,
        MethodId::Psm => 4,
        MethodId::Psw => 5,
        MethodId::PsmMap => 6,
        MethodId::PswMap => 7,
        MethodId::PssCl => 8,
        MethodId::PssPp => 9,
        MethodId::Mm => 10,
    }
}

fn short_value(key: &str, value: &str) -> String {
    if key == "omega" {
        if let Ok(v) = value.parse::<f64>() {
            return if v > 0.0 && v < 1.0 {
                format!("{v}").trim_start_matches('0').to_string()
            } else {
                format!("{v}")
            };
        }
    }
    value.to_string()
}

fn parse_label(label: &str) -> Vec<(String, String)> {
    label
        .split(';')
        .filter(|p| !p.is_empty())
        .map(|p| match p.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (p.to_string(), String::new()),
        })
        .collect()
}

/// Row labels such as `MAP(.2)` or `PSW+MAP(XS)`: only the hyperparameters
/// that vary between rows of the same method appear.
fn row_labels(rows: &[&SummaryRow]) -> Vec<String> {
    let mut varying: BTreeMap<MethodId, Vec<String>> = BTreeMap::new();
    let mut values: BTreeMap<(MethodId, String), std::collections::BTreeSet<String>> = BTreeMap::new();
    for r in rows {
        for (k, v) in parse_label(&r.hyperparam) {
            values.entry((r.method, k)).or_default().insert(v);
        }
    }
    for ((m, k), vals) in &values {
        if vals.len() > 1 {
            varying.entry(*m).or_default().push(k.clone());
        }
    }
    rows.iter()
        .map(|r| {
            let keys = varying.get(&r.method);
            let shown: Vec<String> = parse_label(&r.hyperparam)
                .into_iter()
                .filter(|(k, _)| keys.is_some_and(|ks| ks.contains(k)))
                .map(|(k, v)| short_value(&k, &v))
                .collect();
            if shown.is_empty() {
                r.method.to_string()
            } else {
                format!("{}({})", r.method, shown.join(","))
            }
        })
        .collect()
}

/// Renders summary rows as text tables: benchmarks and covariate-free
/// methods first, then one block per model specification.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut scenarios: Vec<&str> = Vec::new();
    for r in rows {
        if !scenarios.contains(&r.scenario_id.as_str()) {
            scenarios.push(&r.scenario_id);
        }
    }
    let mut out = String::new();
    for sid in scenarios {
        let mut sel: Vec<&SummaryRow> = rows.iter().filter(|r| r.scenario_id == sid).collect();
        sel.sort_by(|a, b| {
            (a.covset, table_rank(a.method))
                .cmp(&(b.covset, table_rank(b.method)))
                .then_with(|| a.hyperparam.cmp(&b.hyperparam))
        });
        let labels = row_labels(&sel);
        let null = sel.iter().all(|r| r.rel_bias_pct.is_none());
        let rate_head = if null { "Type1error" } else { "Power(%)" };
        out.push_str(&format!("Scenario {sid}\n"));
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>11} {:>9} {:>9} {:>7}\n",
            "Methods", "Bias", "RB(%)", rate_head, "ESSR(%)", "eESSR(%)", "Failed"
        ));
        let mut block: Option<Option<CovSet>> = None;
        for (r, label) in sel.iter().zip(&labels) {
            if block != Some(r.covset) {
                if let Some(cs) = r.covset {
                    out.push_str(&format!("Model specification{}\n", cs.id()));
                }
                block = Some(r.covset);
            }
            let rb = r.rel_bias_pct.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
            let rate = if null { format!("{:.3}", r.type1_or_power) } else { format!("{:.1}", 100.0 * r.type1_or_power) };
            out.push_str(&format!(
                "{:<16} {:>8.3} {:>8} {:>11} {:>9.1} {:>9.1} {:>7}\n",
                label, r.bias, rb, rate, r.essr_pct, r.essr_empirical_pct, r.n_failed
            ));
        }
        out.push('\n');
    }
    out
}
