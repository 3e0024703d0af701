//! Aggregation of per-seed evaluation rows into markdown tables and a
//! long-format summary CSV.

use super::config::{CompareDecl, ExperimentConfig, LensDecl, SweepDecl};
use super::pipeline::Workspace;
use crate::error::{Error, Result};
use crate::eval::{learning_retention, EvalRow, LensProfile};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// One number of the summary, in long format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `compare` or `sweep`.
    pub section: String,
    pub name: String,
    /// Checkpoint id for comparisons, parameter value for sweeps.
    pub entry: String,
    pub seed: u64,
    /// A language, or `mean` for averages over languages.
    pub language: String,
    /// `learning`/`retention` for comparisons, the metric for sweeps.
    pub quantity: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub summary: Vec<SummaryRow>,
}

pub const SUMMARY_HEADER: &str = "section,name,entry,seed,language,quantity,value";

impl Report {
    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.summary {
            w.write_record([
                r.section.as_str(),
                &r.name,
                &r.entry,
                &r.seed.to_string(),
                &r.language,
                &r.quantity,
                &format!("{:.6}", r.value),
            ])
            .map_err(|e| Error::data(e.to_string()))?;
        }
        let mut out = format!("{SUMMARY_HEADER}\n").into_bytes();
        out.extend(w.into_inner().map_err(|e| Error::data(e.to_string()))?);
        Ok(out)
    }

    pub fn write(&self, ws: &Workspace) -> Result<()> {
        crate::corpora::write_file(&ws.report_path(), self.markdown.as_bytes())?;
        crate::corpora::write_file(&ws.summary_path(), &self.summary_csv()?)
    }

    /// Summary values matching every given field.
    pub fn values(&self, section: &str, name: &str, entry: &str, language: &str, quantity: &str) -> BTreeMap<u64, f64> {
        self.summary
            .iter()
            .filter(|r| {
                r.section == section
                    && r.name == name
                    && r.entry == entry
                    && r.language == language
                    && r.quantity == quantity
            })
            .map(|r| (r.seed, r.value))
            .collect()
    }
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn fmt_mean_sd(v: &[f64]) -> String {
    let (m, s) = mean_sd(v);
    format!("{m:+.3} ± {s:.3}")
}

fn rows_of(rows: &[EvalRow], checkpoint: &str, languages: Option<&[String]>) -> Vec<EvalRow> {
    rows.iter()
        .filter(|r| r.checkpoint == checkpoint)
        .filter(|r| languages.is_none_or(|ls| ls.iter().any(|l| *l == r.language)))
        .cloned()
        .collect()
}

fn compare_section(
    decl: &CompareDecl,
    rows: &BTreeMap<u64, Vec<EvalRow>>,
    md: &mut String,
    summary: &mut Vec<SummaryRow>,
) -> Result<()> {
    let new: Vec<&str> = decl.new_languages.iter().map(String::as_str).collect();
    let mut langs: Vec<String> = Vec::new();
    let mut per_entry: Vec<(String, Vec<f64>, Vec<f64>, BTreeMap<String, Vec<f64>>)> = Vec::new();
    for after in &decl.after {
        let (mut ls, mut rs) = (Vec::new(), Vec::new());
        let mut by_lang: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (&seed, seed_rows) in rows {
            let b = rows_of(seed_rows, &decl.before, decl.languages.as_deref());
            let a = rows_of(seed_rows, after, decl.languages.as_deref());
            if !b.iter().any(|r| r.metric == decl.metric) {
                return Err(Error::data(format!(
                    "{}: no {} rows for {} in seed {seed}",
                    decl.name, decl.metric, decl.before
                )));
            }
            let lr = learning_retention(&b, &a, &new, &decl.metric)
                .map_err(|e| Error::data(format!("{} ({after}, seed {seed}): {e}", decl.name)))?;
            for (lang, v) in lr.learning.iter().map(|(l, v)| (l, (v, "learning"))).chain(
                lr.retention.iter().map(|(l, v)| (l, (v, "retention"))),
            ) {
                by_lang.entry(lang.clone()).or_default().push(*v.0);
                summary.push(SummaryRow {
                    section: "compare".into(),
                    name: decl.name.clone(),
                    entry: after.clone(),
                    seed,
                    language: lang.clone(),
                    quantity: v.1.into(),
                    value: *v.0,
                });
            }
            for (q, v) in [("learning", lr.mean_learning), ("retention", lr.mean_retention)] {
                summary.push(SummaryRow {
                    section: "compare".into(),
                    name: decl.name.clone(),
                    entry: after.clone(),
                    seed,
                    language: "mean".into(),
                    quantity: q.into(),
                    value: v,
                });
            }
            ls.push(lr.mean_learning);
            rs.push(lr.mean_retention);
        }
        for l in by_lang.keys() {
            if !langs.contains(l) {
                langs.push(l.clone());
            }
        }
        per_entry.push((after.clone(), ls, rs, by_lang));
    }
    langs.sort_by_key(|l| (!new.contains(&l.as_str()), l.clone()));

    writeln!(md, "## {}\n", decl.name).unwrap();
    writeln!(
        md,
        "Change in {} from `{}`; new languages: {}. Learning averages the new languages, retention the others (negative means forgetting). Mean ± sd over seeds.\n",
        decl.metric,
        decl.before,
        decl.new_languages.join(", ")
    )
    .unwrap();
    write!(md, "| checkpoint | learning | retention |").unwrap();
    for l in &langs {
        write!(md, " {l} |").unwrap();
    }
    write!(md, "\n|---|---|---|").unwrap();
    md.push_str(&"---|".repeat(langs.len()));
    md.push('\n');
    for (after, ls, rs, by_lang) in &per_entry {
        write!(md, "| {after} | {} | {} |", fmt_mean_sd(ls), fmt_mean_sd(rs)).unwrap();
        for l in &langs {
            let v = by_lang.get(l).map(|v| mean_sd(v).0).unwrap_or(f64::NAN);
            write!(md, " {v:+.3} |").unwrap();
        }
        md.push('\n');
    }
    md.push('\n');
    Ok(())
}

fn lookup(rows: &[EvalRow], checkpoint: &str, language: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.checkpoint == checkpoint && r.language == language && r.metric == metric)
        .map(|r| r.value)
}

fn sweep_section(
    decl: &SweepDecl,
    rows: &BTreeMap<u64, Vec<EvalRow>>,
    md: &mut String,
    summary: &mut Vec<SummaryRow>,
) -> Result<()> {
    writeln!(md, "## {}\n", decl.name).unwrap();
    for metric in &decl.metrics {
        writeln!(md, "{metric}, mean over seeds:\n").unwrap();
        write!(md, "| {} |", decl.parameter).unwrap();
        for l in &decl.languages {
            write!(md, " {l} |").unwrap();
        }
        write!(md, "\n|---|").unwrap();
        md.push_str(&"---|".repeat(decl.languages.len()));
        md.push('\n');
        for p in &decl.points {
            write!(md, "| {} |", p.value).unwrap();
            for l in &decl.languages {
                let mut vals = Vec::new();
                for (&seed, seed_rows) in rows {
                    let v = lookup(seed_rows, &p.checkpoint, l, metric).ok_or_else(|| {
                        Error::data(format!("{}: no {metric} row for {} on {l} in seed {seed}", decl.name, p.checkpoint))
                    })?;
                    vals.push(v);
                    summary.push(SummaryRow {
                        section: "sweep".into(),
                        name: decl.name.clone(),
                        entry: p.value.clone(),
                        seed,
                        language: l.clone(),
                        quantity: metric.clone(),
                        value: v,
                    });
                }
                write!(md, " {:.3} |", mean_sd(&vals).0).unwrap();
            }
            md.push('\n');
        }
        md.push('\n');
    }
    Ok(())
}

fn lens_section(decl: &LensDecl, p: &LensProfile, md: &mut String) {
    writeln!(
        md,
        "## Logit lens: {} on {}\n\nShare of positions whose top token at each layer's input falls in each script; the last row is the model output.\n",
        decl.checkpoint, decl.language
    )
    .unwrap();
    write!(md, "| layer |").unwrap();
    for b in &p.bins {
        write!(md, " {} |", b.name()).unwrap();
    }
    md.push_str(" entropy |\n|---|");
    md.push_str(&"---|".repeat(p.bins.len() + 1));
    md.push('\n');
    for (l, (row, h)) in p.rows.iter().zip(&p.entropy).enumerate() {
        write!(md, "| {l} |").unwrap();
        for v in row {
            write!(md, " {v:.3} |").unwrap();
        }
        writeln!(md, " {h:.3} |").unwrap();
    }
    md.push('\n');
}

pub fn build_report(
    cfg: &ExperimentConfig,
    rows: &BTreeMap<u64, Vec<EvalRow>>,
    lens: &[(LensDecl, LensProfile)],
) -> Result<Report> {
    let mut md = String::new();
    let mut summary = Vec::new();
    writeln!(md, "# {}\n", cfg.name).unwrap();
    let seeds: Vec<String> = rows.keys().map(u64::to_string).collect();
    writeln!(md, "Seeds: {}.\n", seeds.join(", ")).unwrap();
    for c in &cfg.report.compare {
        compare_section(c, rows, &mut md, &mut summary)?;
    }
    for s in &cfg.report.sweep {
        sweep_section(s, rows, &mut md, &mut summary)?;
    }
    for (d, p) in lens {
        lens_section(d, p, &mut md);
    }
    Ok(Report { markdown: md, summary })
}
