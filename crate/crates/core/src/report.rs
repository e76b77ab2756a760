//! Architecture maps: per (layer, site) fraction of PET parameters kept,
//! averaged over several learned architectures.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::SiteId;
use crate::pipeline::ArchitectureSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct SiteFraction {
    pub site: SiteId,
    /// Mean over specs of kept / capacity at this site.
    pub fraction_kept: f64,
    /// Specs that had capacity at this site.
    pub specs: usize,
}

/// Rows in site order. Sites without PET capacity in any spec are omitted.
pub fn architecture_map(specs: &[ArchitectureSpec]) -> Result<Vec<SiteFraction>> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Usage("report needs at least one spec".into()))?;
    if let Some(other) = specs.iter().find(|s| s.model != first.model) {
        return Err(Error::Input(format!(
            "incompatible model shapes across specs: {:?} vs {:?}",
            first.model, other.model
        )));
    }
    let mut sums: BTreeMap<SiteId, (f64, usize)> = BTreeMap::new();
    for spec in specs {
        let mut per_site: BTreeMap<SiteId, (usize, usize)> = BTreeMap::new();
        for m in &spec.modules {
            let (kept, cap) = m.kept_and_capacity();
            let e = per_site.entry(m.site()).or_default();
            e.0 += kept;
            e.1 += cap;
        }
        for (site, (kept, cap)) in per_site {
            if cap > 0 {
                let e = sums.entry(site).or_default();
                e.0 += kept as f64 / cap as f64;
                e.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(site, (sum, n))| SiteFraction {
            site,
            fraction_kept: sum / n as f64,
            specs: n,
        })
        .collect())
}

/// `layer,site_name,fraction_kept` rows.
pub fn write_report<W: Write>(out: W, rows: &[SiteFraction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "site_name", "fraction_kept"])?;
    for r in rows {
        w.write_record([
            r.site.layer.to_string(),
            r.site.name.to_string(),
            format!("{:.6}", r.fraction_kept),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::Internal(format!("flushing report: {e}")))
}

pub fn write_report_file(path: &Path, rows: &[SiteFraction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(file, rows)
}

pub fn load_spec(path: &Path) -> Result<ArchitectureSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: not an architecture spec: {e}", path.display())))
}
