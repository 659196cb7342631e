//! Fusion quality metrics on gray `[0, 1]` images.
//!
//! Histograms use 256 bins, `bin = floor(256·v)` clamped to 255. SF and AG
//! are on the 255 scale, PSNR has peak 1.

mod correlation;
mod filter;
mod gradient;
mod info;
mod qcb;
mod ssim;
mod vif;

use serde::Serialize;

pub use correlation::{cc_pair, pearson, scd_cc};
pub use gradient::sf_ag;
pub use info::{entropy, joint_counts, mutual_information};
pub use qcb::qcb;
pub use ssim::{psnr, ssim, ssim_psnr, ssim_taps, ssim_window_size, PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use vif::{vif, VIF_SCALES, VIF_SIGMA_NSQ};

use crate::error::Result;
use crate::image::Image;
use crate::par::{self, Exec};

/// Ten-metric row for one fused image and its two sources. Pairwise
/// metrics keep their per-source values; `mi` is the sum over sources,
/// `ssim`, `psnr`, `vif` and `cc` the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub en: f64,
    pub mi: f64,
    pub sf: f64,
    pub vif: f64,
    pub ssim: f64,
    pub ag: f64,
    pub scd: f64,
    pub psnr: f64,
    pub cc: f64,
    pub qcb: f64,
    pub mi_i: f64,
    pub mi_v: f64,
    pub ssim_i: f64,
    pub ssim_v: f64,
    pub psnr_i: f64,
    pub psnr_v: f64,
    pub vif_i: f64,
    pub vif_v: f64,
    pub cc_i: f64,
    pub cc_v: f64,
}

pub const CSV_COLUMNS: [&str; 10] = ["EN", "MI", "SF", "VIF", "SSIM", "AG", "SCD", "PSNR", "CC", "Qcb"];

impl MetricsReport {
    /// Values in [`CSV_COLUMNS`] order.
    pub fn columns(&self) -> [f64; 10] {
        [self.en, self.mi, self.sf, self.vif, self.ssim, self.ag, self.scd, self.psnr, self.cc, self.qcb]
    }

    /// Field-wise mean of several reports.
    pub fn mean(rows: &[MetricsReport]) -> Option<MetricsReport> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            en: avg(|r| r.en),
            mi: avg(|r| r.mi),
            sf: avg(|r| r.sf),
            vif: avg(|r| r.vif),
            ssim: avg(|r| r.ssim),
            ag: avg(|r| r.ag),
            scd: avg(|r| r.scd),
            psnr: avg(|r| r.psnr),
            cc: avg(|r| r.cc),
            qcb: avg(|r| r.qcb),
            mi_i: avg(|r| r.mi_i),
            mi_v: avg(|r| r.mi_v),
            ssim_i: avg(|r| r.ssim_i),
            ssim_v: avg(|r| r.ssim_v),
            psnr_i: avg(|r| r.psnr_i),
            psnr_v: avg(|r| r.psnr_v),
            vif_i: avg(|r| r.vif_i),
            vif_v: avg(|r| r.vif_v),
            cc_i: avg(|r| r.cc_i),
            cc_v: avg(|r| r.cc_v),
        })
    }
}

/// All metrics for `f` fused from `i` and `v`. Color inputs are reduced to luma.
pub fn report(f: &Image, i: &Image, v: &Image) -> Result<MetricsReport> {
    let (f, i, v) = (f.luma(), i.luma(), v.luma());
    f.same_dims(&i)?;
    f.same_dims(&v)?;
    let (mi_i, mi_v) = (mutual_information(&f, &i)?, mutual_information(&f, &v)?);
    let (ssim_i, psnr_i) = ssim_psnr(&f, &i)?;
    let (ssim_v, psnr_v) = ssim_psnr(&f, &v)?;
    let (vif_i, vif_v) = (vif(&f, &i)?, vif(&f, &v)?);
    let (cc_i, cc_v) = cc_pair(&f, &i, &v)?;
    let (scd, cc) = scd_cc(&f, &i, &v)?;
    let (sf, ag) = sf_ag(&f)?;
    Ok(MetricsReport {
        en: entropy(&f)?,
        mi: mi_i + mi_v,
        sf,
        vif: (vif_i + vif_v) / 2.0,
        ssim: (ssim_i + ssim_v) / 2.0,
        ag,
        scd,
        psnr: (psnr_i + psnr_v) / 2.0,
        cc,
        qcb: qcb(&f, &i, &v)?,
        mi_i,
        mi_v,
        ssim_i,
        ssim_v,
        psnr_i,
        psnr_v,
        vif_i,
        vif_v,
        cc_i,
        cc_v,
    })
}

/// [`report`] over many triples, parallel under [`Exec::Parallel`].
pub fn report_batch(exec: Exec, triples: &[(Image, Image, Image)]) -> Vec<Result<MetricsReport>> {
    par::map_range(exec, triples.len(), |k| {
        let (f, i, v) = &triples[k];
        report(f, i, v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_triple() {
        let x = Image::gray_from_fn(16, 16, |r, c| ((r * 5 + c * 3) % 13) as f64 / 12.0);
        let rep = report(&x, &x, &x).unwrap();
        assert_eq!(rep.mi, 2.0 * rep.en);
        assert_eq!(rep.ssim, 1.0);
        assert_eq!(rep.cc, 1.0);
        let c = Image::constant(16, 16, 0.4);
        let rep = report(&c, &c, &c).unwrap();
        assert_eq!((rep.sf, rep.ag), (0.0, 0.0));
        assert!(rep.columns().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn composition_is_exact() {
        let f = Image::gray_from_fn(12, 12, |r, c| ((r * c) % 9) as f64 / 9.0);
        let i = Image::gray_from_fn(12, 12, |r, c| ((r + 2 * c) % 5) as f64 / 5.0);
        let v = Image::gray_from_fn(12, 12, |r, c| ((3 * r + c) % 7) as f64 / 7.0);
        let rep = report(&f, &i, &v).unwrap();
        assert_eq!(rep.qcb, qcb(&f, &i, &v).unwrap());
        assert_eq!(rep.vif_i, vif(&f, &i).unwrap());
        assert_eq!(rep.mi, mutual_information(&f, &i).unwrap() + mutual_information(&f, &v).unwrap());
        let seq = report_batch(Exec::Sequential, &[(f.clone(), i.clone(), v.clone())]);
        assert_eq!(*seq[0].as_ref().unwrap(), rep);
    }
}
