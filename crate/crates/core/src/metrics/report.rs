use std::fmt::Write as _;

/// Header of the per-image CSV.
pub const CSV_HEADER: &str = "group,sample,modality,psnr,ssim,lpips";

const SUMMARY_HEADER: &str =
    "group,count,psnr_mean,psnr_std,ssim_mean,ssim_std,lpips_mean,lpips_std,fid";

/// Scores of one synthesized image against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    /// Free-form set label, usually a mask string.
    pub group: String,
    pub sample: usize,
    pub modality: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    /// Images with infinite PSNR, left out of the PSNR mean.
    pub exact: usize,
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub lpips: (f64, f64),
    pub fid: Option<f64>,
}

/// Per-image scores plus per-group FID.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub fids: Vec<(String, f64)>,
}

/// Mean and sample standard deviation of the finite values; NaN when empty.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt4(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn push(&mut self, score: ImageScore) {
        self.images.push(score);
    }

    pub fn set_fid(&mut self, group: &str, value: f64) {
        match self.fids.iter_mut().find(|(g, _)| g == group) {
            Some(entry) => entry.1 = value,
            None => self.fids.push((group.to_string(), value)),
        }
    }

    pub fn merge(&mut self, other: MetricReport) {
        self.images.extend(other.images);
        for (g, v) in other.fids {
            self.set_fid(&g, v);
        }
    }

    /// Groups in order of first appearance.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.images {
            if !out.contains(&s.group) {
                out.push(s.group.clone());
            }
        }
        for (g, _) in &self.fids {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    pub fn summaries(&self) -> Vec<GroupSummary> {
        self.groups()
            .into_iter()
            .map(|group| {
                let rows: Vec<&ImageScore> =
                    self.images.iter().filter(|s| s.group == group).collect();
                GroupSummary {
                    count: rows.len(),
                    exact: rows.iter().filter(|s| s.psnr == f64::INFINITY).count(),
                    psnr: mean_std(rows.iter().map(|s| s.psnr)),
                    ssim: mean_std(rows.iter().map(|s| s.ssim)),
                    lpips: mean_std(rows.iter().map(|s| s.lpips)),
                    fid: self.fids.iter().find(|(g, _)| *g == group).map(|(_, v)| *v),
                    group,
                }
            })
            .collect()
    }

    pub fn overall(&self) -> GroupSummary {
        GroupSummary {
            group: "all".into(),
            count: self.images.len(),
            exact: self
                .images
                .iter()
                .filter(|s| s.psnr == f64::INFINITY)
                .count(),
            psnr: mean_std(self.images.iter().map(|s| s.psnr)),
            ssim: mean_std(self.images.iter().map(|s| s.ssim)),
            lpips: mean_std(self.images.iter().map(|s| s.lpips)),
            fid: None,
        }
    }

    /// One row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.images {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.group,
                s.sample,
                s.modality,
                fmt4(s.psnr),
                fmt4(s.ssim),
                fmt4(s.lpips)
            );
        }
        out
    }

    /// One row per group; FID is empty where it was not computed.
    pub fn summary_text(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for g in self.summaries() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                g.group,
                g.count,
                fmt4(g.psnr.0),
                fmt4(g.psnr.1),
                fmt4(g.ssim.0),
                fmt4(g.ssim.1),
                fmt4(g.lpips.0),
                fmt4(g.lpips.1),
                g.fid.map(fmt4).unwrap_or_default()
            );
        }
        out
    }
}
