use std::fmt::Write as _;

use super::codec::{DecodeError, Reader, Writer};

pub const CSV_HEADER: &str = "round,site_id,modalities,mdsc,loss,fed_ratio";

/// One evaluation line. `site` is a site id or `"all"` for the client summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub site: String,
    /// Modality names joined with `+`.
    pub modalities: String,
    pub mdsc: f64,
    pub loss: f64,
    pub fed_ratio: Option<f64>,
}

impl MetricsRow {
    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.round);
        w.str(&self.site);
        w.str(&self.modalities);
        w.f64(self.mdsc);
        w.f64(self.loss);
        w.opt_f64(self.fed_ratio);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            round: r.u64()?,
            site: r.str()?,
            modalities: r.str()?,
            mdsc: r.f64()?,
            loss: r.f64()?,
            fed_ratio: r.opt_f64()?,
        })
    }
}

/// Renders rows as CSV. Floats use the shortest exact representation.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let ratio = r.fed_ratio.map_or(String::new(), |v| v.to_string());
        writeln!(out, "{},{},{},{},{},{}", r.round, r.site, r.modalities, r.mdsc, r.loss, ratio)
            .expect("writing to a String");
    }
    out
}

/// Rows for `round` whose site column equals `site`.
pub fn rows_for<'a>(rows: &'a [MetricsRow], round: u64, site: &'a str) -> impl Iterator<Item = &'a MetricsRow> {
    rows.iter().filter(move |r| r.round == round && r.site == site)
}
