//! Image and segmentation metrics.

use std::collections::BTreeMap;

use crate::data::Image;
use crate::error::{Error, Result};

/// Reported when two images are identical.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::Shape(format!(
            "{}×{}×{} vs {}×{}×{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log10(1 / MSE)` for values in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows and channels,
/// with k1 = 0.01, k2 = 0.03 and a dynamic range of 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("{w}×{h} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    // Separable filtering: rows first, then columns.
    let filter = |img: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img(x + k, y)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let mut total = 0.0;
    for c in 0..ch {
        let pa = |x: usize, y: usize| a.data[(y * w + x) * ch + c] as f64;
        let pb = |x: usize, y: usize| b.data[(y * w + x) * ch + c] as f64;
        let mu_a = filter(&pa);
        let mu_b = filter(&pb);
        let aa = filter(&|x, y| pa(x, y) * pa(x, y));
        let bb = filter(&|x, y| pb(x, y) * pb(x, y));
        let ab = filter(&|x, y| pa(x, y) * pb(x, y));
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ch * ow * oh) as f64)
}

/// Number of leading frames used to fit the label assignment.
pub const ASSIGNMENT_FRAMES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiouMode {
    /// Intersections and unions summed over all frames, then divided.
    Joint,
    /// IoU per frame (labels present in that frame), averaged over frames.
    PerFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelIou {
    pub label: u32,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// Joint scores of every ground-truth label, background included.
    pub per_label: Vec<LabelIou>,
    /// Predicted label → ground-truth label.
    pub assignment: BTreeMap<u32, u32>,
}

impl MiouReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("label\tiou\tintersection\tunion\n");
        for l in &self.per_label {
            s.push_str(&format!("{}\t{:.6}\t{}\t{}\n", l.label, l.iou, l.intersection, l.union));
        }
        s.push_str(&format!("mean\t{:.6}\t\t\n", self.miou));
        s
    }
}

/// Maps every predicted label to the ground-truth label it overlaps most in
/// the first [`ASSIGNMENT_FRAMES`] frames (ties to the lower label). Labels
/// absent there fall back to their overlap over all frames.
pub fn fit_assignment(pred: &[Vec<u32>], gt: &[Vec<u32>]) -> BTreeMap<u32, u32> {
    let mut fit = if pred.len() < ASSIGNMENT_FRAMES {
        log::warn!(
            "only {} frames; fitting the label assignment on all of them",
            pred.len()
        );
        pred.len()
    } else {
        ASSIGNMENT_FRAMES
    };
    let mut out = BTreeMap::new();
    loop {
        let mut counts: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
        for (p, g) in pred[..fit].iter().zip(&gt[..fit]) {
            for (&a, &b) in p.iter().zip(g) {
                *counts.entry(a).or_default().entry(b).or_default() += 1;
            }
        }
        for (p, row) in counts {
            let best = row.iter().fold((0u32, 0u64), |acc, (&g, &n)| if n > acc.1 { (g, n) } else { acc });
            out.entry(p).or_insert(best.0);
        }
        if fit == pred.len() {
            return out;
        }
        fit = pred.len();
    }
}

/// Mean IoU over ground-truth labels after relabelling predictions with
/// [`fit_assignment`]. Background (label 0) counts as a label.
pub fn miou(pred: &[Vec<u32>], gt: &[Vec<u32>], mode: MiouMode) -> Result<MiouReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len())));
    }
    if let Some(i) = (0..pred.len()).find(|&i| pred[i].len() != gt[i].len()) {
        return Err(Error::Shape(format!(
            "frame {i}: {} predicted pixels vs {}",
            pred[i].len(),
            gt[i].len()
        )));
    }
    let assignment = fit_assignment(pred, gt);
    let mut joint: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let mut frame_means = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let mut frame: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for (&a, &b) in p.iter().zip(g) {
            let a = assignment[&a];
            frame.entry(b).or_default();
            if a == b {
                frame.get_mut(&b).unwrap().0 += 1;
                frame.get_mut(&b).unwrap().1 += 1;
            } else {
                frame.get_mut(&b).unwrap().1 += 1;
                frame.entry(a).or_default().1 += 1;
            }
        }
        let mut ious = Vec::new();
        for (&label, &(i, u)) in &frame {
            let e = joint.entry(label).or_default();
            e.0 += i;
            e.1 += u;
            if g.contains(&label) {
                ious.push(i as f64 / u as f64);
            }
        }
        frame_means.push(ious.iter().sum::<f64>() / ious.len() as f64);
    }
    let gt_labels: std::collections::BTreeSet<u32> = gt.iter().flatten().copied().collect();
    let per_label: Vec<LabelIou> = gt_labels
        .iter()
        .map(|&label| {
            let (i, u) = joint[&label];
            LabelIou {
                label,
                iou: i as f64 / u as f64,
                intersection: i,
                union: u,
            }
        })
        .collect();
    let miou = match mode {
        MiouMode::Joint => per_label.iter().map(|l| l.iou).sum::<f64>() / per_label.len() as f64,
        MiouMode::PerFrame => frame_means.iter().sum::<f64>() / frame_means.len() as f64,
    };
    Ok(MiouReport {
        miou,
        per_label,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, v: impl Fn(usize) -> f32) -> Image {
        Image::new(w, h, 1, (0..w * h).map(v).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = gray(4, 4, |_| 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &gray(4, 5, |_| 0.5)).is_err());
    }

    #[test]
    fn ssim_self_and_negative() {
        let a = gray(16, 16, |i| (i % 7) as f32 / 7.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = gray(16, 16, |_| 0.8);
        let n = gray(16, 16, |_| 0.2);
        assert!(ssim(&c, &n).unwrap() < 1.0);
        assert!(ssim(&gray(8, 16, |_| 0.0), &gray(8, 16, |_| 0.0)).is_err());
    }

    #[test]
    fn miou_over_segmentation() {
        let gt = vec![vec![0, 1, 1, 1]; 12];
        let pred = vec![vec![0, 3, 3, 5]; 12];
        let r = miou(&pred, &gt, MiouMode::Joint).unwrap();
        assert_eq!(r.assignment[&3], 1);
        assert_eq!(r.assignment[&5], 1);
        assert_eq!(r.miou, 1.0);
        assert_eq!(miou(&gt, &gt, MiouMode::PerFrame).unwrap().miou, 1.0);
    }
}
