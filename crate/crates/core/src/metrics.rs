//! Full-reference image quality: PSNR, sliding-window SSIM and dataset-level
//! aggregation with per-image records.

use std::fmt::Write as _;
use std::path::Path;

use cevae_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{Image, CHANNELS};
use crate::objectives::{lpips_loss, ssim_constants, FeatureExtractor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// PSNR of two equally long value slices. Returns the cap when the error is
/// negligible relative to the peak.
pub fn psnr_values(gt: &[f64], pred: &[f64], peak: f64) -> Result<f64> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(CoreError::Input(format!(
            "psnr of {} vs {} values",
            gt.len(),
            pred.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(CoreError::Input(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let mse = gt
        .iter()
        .zip(pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / gt.len() as f64;
    if mse < peak * peak * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR on images mapped to `[0, 1]`, peak 1.
pub fn psnr(gt: &Image, pred: &Image) -> Result<f64> {
    check_same_size(gt, pred)?;
    psnr_values(&gt.to_unit_range(), &pred.to_unit_range(), 1.0)
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::Input(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

// Separable valid-mode filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of two planes with an 11x11 Gaussian window over the valid
/// region.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(CoreError::Input("ssim plane size mismatch".into()));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &taps);
    let (k1, k2) = ssim_constants(range);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + k1) * (2.0 * cov + k2)) / ((ma * ma + mb * mb + k1) * (va + vb + k2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Channel-averaged sliding-window SSIM on images mapped to `[0, 1]`.
pub fn ssim_metric(gt: &Image, pred: &Image) -> Result<f64> {
    check_same_size(gt, pred)?;
    let (ga, pa) = (gt.to_unit_range(), pred.to_unit_range());
    let n = gt.height() * gt.width();
    let mut sum = 0.0;
    for c in 0..CHANNELS {
        sum += ssim_plane(
            &ga[c * n..(c + 1) * n],
            &pa[c * n..(c + 1) * n],
            gt.height(),
            gt.width(),
            1.0,
        )?;
    }
    Ok(sum / CHANNELS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile with midpoint interpolation between the two nearest ranks.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    (sorted[pos.floor() as usize] + sorted[pos.ceil() as usize]) / 2.0
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        Some(Self {
            count: values.len(),
            mean,
            std,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Sorted by image id.
    pub records: Vec<MetricRecord>,
    /// Ids of pairs that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
    pub psnr: Summary,
    pub ssim: Summary,
    pub lpips: Option<Summary>,
}

/// One loaded evaluation sample: `(id, degraded, reference)` or the reason
/// it could not be read.
pub type PairResult = (String, Result<(Image, Image)>);

/// Scores `enhance(degraded)` against the reference for every readable pair.
pub fn evaluate_dataset<I>(
    pairs: I,
    enhance: &dyn Fn(&Image) -> Result<Image>,
    extractor: Option<&dyn FeatureExtractor<f64>>,
) -> Result<Evaluation>
where
    I: IntoIterator<Item = PairResult>,
{
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (id, pair) in pairs {
        let (degraded, reference) = match pair {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push((id, e.to_string()));
                continue;
            }
        };
        let out = enhance(&degraded)?;
        let lpips = match extractor {
            Some(phi) => {
                let d = lpips_loss(&reference.to_tensor::<f64>(), &out.to_tensor(), phi)?;
                Some(d.item())
            }
            None => None,
        };
        records.push(MetricRecord {
            psnr: psnr(&reference, &out)?,
            ssim: ssim_metric(&reference, &out)?,
            lpips,
            image_id: id,
        });
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let column = |f: fn(&MetricRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let psnr = Summary::of(&column(|r| r.psnr))
        .ok_or_else(|| CoreError::Input("no readable pairs to evaluate".into()))?;
    let ssim = Summary::of(&column(|r| r.ssim)).expect("non-empty");
    let lpips = if extractor.is_some() {
        Summary::of(&column(|r| r.lpips.unwrap_or(f64::NAN)))
    } else {
        None
    };
    Ok(Evaluation {
        records,
        skipped,
        psnr,
        ssim,
        lpips,
    })
}

/// Identity model: scores the degraded input itself.
pub fn identity(img: &Image) -> Result<Image> {
    Ok(img.clone())
}

const RECORDS_HEADER: &str = "id\tpsnr\tssim\tlpips";

/// One tab-separated line per record; values use the shortest text that reads
/// back to the same number.
pub fn format_records(records: &[MetricRecord]) -> String {
    let mut s = String::from(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let lpips = r.lpips.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.image_id, r.psnr, r.ssim, lpips);
    }
    s
}

const SUMMARY_HEADER: &str = "# metric\tcount\tmean\tstd\tmin\tq1\tmedian\tq3\tmax";

/// Records followed by a summary block. Summary lines start with `#` so
/// [`parse_records`] skips them.
pub fn format_evaluation(eval: &Evaluation) -> String {
    let mut s = format_records(&eval.records);
    let _ = writeln!(s, "{SUMMARY_HEADER}");
    let rows = [
        ("psnr", Some(eval.psnr)),
        ("ssim", Some(eval.ssim)),
        ("lpips", eval.lpips),
    ];
    for (name, summary) in rows {
        if let Some(m) = summary {
            let _ = writeln!(
                s,
                "# {name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.count, m.mean, m.std, m.min, m.q1, m.median, m.q3, m.max
            );
        }
    }
    for (id, reason) in &eval.skipped {
        let _ = writeln!(s, "# skipped\t{id}\t{reason}");
    }
    s
}

/// Reads the per-image lines of a metrics file, ignoring `#` lines.
pub fn parse_records(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(CoreError::Input(
            "metrics file lacks the id/psnr/ssim/lpips header".into(),
        ));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || CoreError::Input(format!("metrics line {}: '{line}'", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricRecord {
                image_id: f[0].to_string(),
                psnr: num(f[1])?,
                ssim: num(f[2])?,
                lpips: if f[3] == "-" { None } else { Some(num(f[3])?) },
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, format_records(records)).map_err(|e| CoreError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    parse_records(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
}

/// PSNR of every image in an `N x 3 x H x W` prediction batch against the
/// matching target.
pub fn batch_psnr(gt: &Tensor<f64>, pred: &Tensor<f64>) -> Result<Vec<f64>> {
    (0..gt.dim(0))
        .map(|i| {
            psnr(
                &Image::from_tensor(gt, i)?,
                &Image::from_tensor(&pred.clamp(-1.0, 1.0), i)?,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_analytic() {
        let a = vec![0.0; 100];
        let b = vec![0.1; 100];
        assert!((psnr_values(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr_values(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - w[10]).abs() < 1e-18);
    }

    #[test]
    fn constant_shift_matches_luminance_term() {
        let mu = 0.2;
        let a = vec![mu; 15 * 15];
        let b = vec![mu + 0.5; 15 * 15];
        let (k1, _) = ssim_constants(1.0);
        let expected = (2.0 * mu * (mu + 0.5) + k1) / (mu * mu + (mu + 0.5) * (mu + 0.5) + k1);
        assert!((ssim_plane(&a, &b, 15, 15, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn quartiles_use_midpoint() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.5, 2.5, 3.5));
        assert_eq!((s.min, s.max, s.mean), (1.0, 4.0, 2.5));
    }

    #[test]
    fn records_round_trip() {
        let r = vec![
            MetricRecord {
                image_id: "a".into(),
                psnr: 21.123456789012345,
                ssim: 0.5,
                lpips: None,
            },
            MetricRecord {
                image_id: "b".into(),
                psnr: 100.0,
                ssim: 1.0,
                lpips: Some(0.25),
            },
        ];
        assert_eq!(parse_records(&format_records(&r)).unwrap(), r);
    }
}
