//! Metric tables over aligned `(fused, A, B)` directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use rffusion::config::Config;
use rffusion::imageio::read_image;
use rffusion::metrics::{report_batch, MetricsReport, CSV_COLUMNS};
use rffusion::par::Exec;
use serde_json::{json, Value};

use crate::data::{image_names, seeds_from_a};

#[derive(Debug, Clone)]
pub struct EvalTable {
    pub rows: Vec<(String, MetricsReport)>,
    pub mean: Option<MetricsReport>,
    /// Relative paths without a counterpart, e.g. `B/0003.png`.
    pub missing: Vec<String>,
}

/// Evaluates every name present in all three directories. Names seen in
/// only some of them are reported in `missing`.
pub fn evaluate(cfg: &Config, fused: &Path, a: &Path, b: &Path) -> Result<EvalTable> {
    let nf: BTreeSet<String> = image_names(fused)?.into_iter().collect();
    let na: BTreeSet<String> = image_names(a)?.into_iter().collect();
    let nb: BTreeSet<String> = image_names(b)?.into_iter().collect();
    let mut missing = Vec::new();
    for name in nf.union(&na).chain(nb.iter()).collect::<BTreeSet<_>>() {
        for (label, set) in [("fused", &nf), ("A", &na), ("B", &nb)] {
            if !set.contains(name) {
                missing.push(format!("{label}/{name}"));
            }
        }
    }
    let names: Vec<String> = nf.iter().filter(|n| na.contains(*n) && nb.contains(*n)).cloned().collect();
    let a_seeds = seeds_from_a(cfg.flow.start, cfg.data.kind);
    let mut triples = Vec::with_capacity(names.len());
    for n in &names {
        let f = read_image(&fused.join(n)).with_context(|| format!("reading fused/{n}"))?;
        let ia = read_image(&a.join(n)).with_context(|| format!("reading A/{n}"))?;
        let ib = read_image(&b.join(n)).with_context(|| format!("reading B/{n}"))?;
        triples.push(if a_seeds { (f, ib, ia) } else { (f, ia, ib) });
    }
    let mut rows = Vec::with_capacity(names.len());
    for (n, r) in names.into_iter().zip(report_batch(Exec::Parallel, &triples)) {
        rows.push((n.clone(), r.with_context(|| format!("metrics for {n}"))?));
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    Ok(EvalTable { mean: MetricsReport::mean(&reports), rows, missing })
}

impl EvalTable {
    /// Header, one line per triple and a final `mean` line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("name,{}\n", CSV_COLUMNS.join(","));
        let mut line = |name: &str, r: &MetricsReport| {
            let vals: Vec<String> = r.columns().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{name},{}", vals.join(","));
        };
        for (n, r) in &self.rows {
            line(n, r);
        }
        if let Some(m) = &self.mean {
            line("mean", m);
        }
        s
    }

    pub fn to_json(&self) -> Result<Value> {
        let mut rows = Vec::with_capacity(self.rows.len());
        for (n, r) in &self.rows {
            let mut v = serde_json::to_value(r)?;
            v["name"] = json!(n);
            rows.push(v);
        }
        Ok(json!({ "rows": rows, "mean": self.mean, "missing": self.missing }))
    }
}
