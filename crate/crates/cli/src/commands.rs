use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use freqdiff::conditioning::MODALITIES;
use freqdiff::denoiser::DenoiserParams;
use freqdiff::metrics::mean_std;
use freqdiff::phantoms::{generate_dataset, read_dataset, write_dataset, PhantomSample};
use freqdiff::trainer::{
    load_checkpoint, prepare, save_checkpoint, train, TrainState, TIMING_LOG_HEADER,
    TRAIN_LOG_HEADER,
};
use freqdiff::{Error, Result};

use crate::config::RunConfig;
use crate::evaluation::{
    bootstrap_mean, crossed_tasks, cycled_tasks, linear_fit, request_seed, synthesize_tasks,
    write_pfm, write_pgm, Scorer,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Test samples, truncated to `limit` when it is non-zero.
pub fn load_samples(path: &Path, limit: usize) -> Result<Vec<PhantomSample>> {
    let mut samples = read_dataset(path)?.samples;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", path.display())));
    }
    if limit > 0 {
        samples.truncate(limit);
    }
    Ok(samples)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let out = cfg.require_path("out")?;
    let dataset = generate_dataset(cfg.count, cfg.image_size, cfg.data_seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let manifest = write_dataset(&dataset, out)?;
    Ok(format!(
        "wrote {} samples of {}x{} to {} (crc32 {:08x})",
        manifest.sample_count,
        manifest.height,
        manifest.width,
        out.display(),
        manifest.crc32
    ))
}

/// Optional sinks for the training logs.
pub struct TrainLogs<'a> {
    pub steps: Option<&'a mut dyn std::io::Write>,
    pub timing: Option<&'a mut dyn std::io::Write>,
}

/// Build and train a model from `cfg` on `samples`.
pub fn train_model(
    cfg: &RunConfig,
    samples: &[PhantomSample],
    logs: TrainLogs<'_>,
) -> Result<(TrainState, Vec<f64>)> {
    let pipeline = cfg.pipeline()?;
    let params = DenoiserParams::init(cfg.denoiser()?, cfg.init_seed)?;
    let mut state = TrainState::new(params, pipeline, cfg.train_config()?)?;
    let data = prepare(samples, &state.pipeline.frequency);
    let TrainLogs {
        mut steps,
        mut timing,
    } = logs;
    let log_err = |e: std::io::Error| Error::Io {
        path: PathBuf::from("<training log>"),
        source: e,
    };
    if let Some(w) = steps.as_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}").map_err(log_err)?;
    }
    if let Some(w) = timing.as_mut() {
        writeln!(w, "{TIMING_LOG_HEADER}").map_err(log_err)?;
    }
    let losses = train(&mut state, &data, None, &mut |record| {
        if let Some(w) = steps.as_mut() {
            writeln!(w, "{}", record.csv_row()).map_err(log_err)?;
        }
        if let Some(w) = timing.as_mut() {
            writeln!(w, "{}", record.timing_row()).map_err(log_err)?;
        }
        Ok(())
    })?;
    Ok((state, losses))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let data_path = cfg.require_path("train_data")?;
    let out = cfg.require_path("out")?;
    let samples = read_dataset(data_path)?.samples;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let log_path = with_suffix(out, ".train.csv");
    let timing_path = with_suffix(out, ".timing.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let mut timing = BufWriter::new(fs::File::create(&timing_path).map_err(io_err(&timing_path))?);
    let (state, losses) = train_model(
        cfg,
        &samples,
        TrainLogs {
            steps: Some(&mut log),
            timing: Some(&mut timing),
        },
    )?;
    log.flush().map_err(io_err(&log_path))?;
    timing.flush().map_err(io_err(&timing_path))?;
    save_checkpoint(&state, out)?;
    write_file(&with_suffix(out, ".config"), &cfg.to_text())?;
    let last = losses.iter().rev().take(50).copied().collect::<Vec<_>>();
    Ok(format!(
        "trained {} steps over {} epochs; final running loss {:.4}; checkpoint {}",
        state.step,
        state.epoch,
        last.iter().sum::<f64>() / last.len().max(1) as f64,
        out.display()
    ))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let mask = cfg
        .mask
        .ok_or_else(|| Error::Config("--mask is required (e.g. 0111)".into()))?;
    let state = load_checkpoint(cfg.require_path("checkpoint")?)?;
    let samples = load_samples(cfg.require_path("test_data")?, cfg.limit)?;
    let out = cfg.require_path("out")?;
    create_dir(out)?;
    let tasks = crossed_tasks(samples.len(), &[mask]);
    let outputs = synthesize_tasks(
        &state.params,
        &state.pipeline,
        &samples,
        &tasks,
        cfg.sample_seed,
    )?;
    for (&(i, _), images) in tasks.iter().zip(&outputs) {
        for (img, m) in images.iter().zip(mask.missing()) {
            let stem = format!("s{i:04}_{}", MODALITIES[m]);
            write_pgm(img, &out.join(format!("{stem}.pgm")))?;
            write_pfm(img, &out.join(format!("{stem}.pfm")))?;
        }
    }
    let report = Scorer::new(cfg.ssim_mode, cfg.feature_seed).report(&samples, &tasks, &outputs)?;
    write_file(&out.join("images.csv"), &report.to_csv())?;
    let mut seeds = String::from("sample,mask,seed\n");
    for &(i, m) in &tasks {
        let _ = writeln!(seeds, "{i},{m},{}", request_seed(cfg.sample_seed, i, m));
    }
    write_file(&out.join("seeds.csv"), &seeds)?;
    let overall = report.overall();
    Ok(format!(
        "synthesized {} images for mask {mask}; mean PSNR {:.2} dB, SSIM {:.4}",
        overall.count, overall.psnr.0, overall.ssim.0
    ))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let state = load_checkpoint(cfg.require_path("checkpoint")?)?;
    let samples = load_samples(cfg.require_path("test_data")?, cfg.limit)?;
    let out = cfg.require_path("out")?;
    create_dir(out)?;
    let masks = cfg.masks.masks();
    let tasks = crossed_tasks(samples.len(), &masks);
    let outputs = synthesize_tasks(
        &state.params,
        &state.pipeline,
        &samples,
        &tasks,
        cfg.sample_seed,
    )?;
    let report = Scorer::new(cfg.ssim_mode, cfg.feature_seed).report(&samples, &tasks, &outputs)?;
    write_file(&out.join("images.csv"), &report.to_csv())?;
    write_file(&out.join("summary.csv"), &report.summary_text())?;
    Ok(format!(
        "evaluated {} masks x {} samples; summary in {}",
        masks.len(),
        samples.len(),
        out.join("summary.csv").display()
    ))
}

/// Load `path` if it holds a checkpoint for `cfg`, otherwise train one and save it there.
fn family_member(
    cfg: &RunConfig,
    path: &Path,
    train_samples: &mut Option<Vec<PhantomSample>>,
) -> Result<TrainState> {
    if path.exists() {
        let state = load_checkpoint(path)?;
        if state.pipeline != cfg.pipeline()?
            || state.train != cfg.train_config()?
            || state.params.config != cfg.denoiser()?
        {
            return Err(Error::Config(format!(
                "{} was trained with a different configuration; remove it to retrain",
                path.display()
            )));
        }
        return Ok(state);
    }
    if train_samples.is_none() {
        *train_samples = Some(read_dataset(cfg.require_path("train_data")?)?.samples);
    }
    let samples = train_samples.as_deref().expect("loaded above");
    let log_path = with_suffix(path, ".train.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let (state, _) = train_model(
        cfg,
        samples,
        TrainLogs {
            steps: Some(&mut log),
            timing: None,
        },
    )?;
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&state, path)?;
    Ok(state)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let family = cfg.require_path("family_dir")?;
    let out = cfg.require_path("out")?;
    create_dir(family)?;
    create_dir(out)?;
    let samples = load_samples(cfg.require_path("test_data")?, cfg.limit)?;
    let tasks = cycled_tasks(samples.len(), &cfg.masks.masks());
    let scorer = Scorer::new(cfg.ssim_mode, cfg.feature_seed);
    let mut train_samples = None;
    let mut rows = Vec::new();
    for name in &cfg.variants {
        let vcfg = cfg.variant(name)?;
        let state = family_member(
            &vcfg,
            &family.join(format!("{name}.ckpt")),
            &mut train_samples,
        )?;
        let outputs = synthesize_tasks(
            &state.params,
            &state.pipeline,
            &samples,
            &tasks,
            cfg.sample_seed,
        )?;
        let report = scorer.report(&samples, &tasks, &outputs)?;
        write_file(&out.join(format!("{name}.images.csv")), &report.to_csv())?;
        rows.push((name.clone(), report));
    }
    let baseline = rows.iter().find(|r| r.0 == "full").map(|r| r.1.clone());
    let mut text = String::from(
        "variant,count,psnr_mean,psnr_std,ssim_mean,ssim_std,lpips_mean,lpips_std,delta_psnr,delta_lower95,delta_upper95\n",
    );
    for (name, report) in &rows {
        let o = report.overall();
        let delta = match &baseline {
            Some(base) if name != "full" => {
                let diffs: Vec<f64> = base
                    .images
                    .iter()
                    .zip(&report.images)
                    .map(|(b, v)| b.psnr - v.psnr)
                    .filter(|d| d.is_finite())
                    .collect();
                let b = bootstrap_mean(&diffs, cfg.bootstrap_resamples, cfg.sample_seed)?;
                format!("{:.4},{:.4},{:.4}", b.mean, b.lower, b.upper)
            }
            _ => ",,".to_string(),
        };
        let _ = writeln!(
            text,
            "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{delta}",
            o.count, o.psnr.0, o.psnr.1, o.ssim.0, o.ssim.1, o.lpips.0, o.lpips.1
        );
    }
    write_file(&out.join("ablation.csv"), &text)?;
    Ok(format!(
        "ablation over {} variants; report in {} (delta = full minus variant PSNR)",
        rows.len(),
        out.join("ablation.csv").display()
    ))
}

/// One row of a step-count sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub steps: usize,
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub seconds_per_image: f64,
}

pub fn cmd_sweep_t(cfg: &RunConfig) -> Result<String> {
    let family = cfg.require_path("family_dir")?;
    let out = cfg.require_path("out")?;
    create_dir(family)?;
    create_dir(out)?;
    let samples = load_samples(cfg.require_path("test_data")?, cfg.limit)?;
    let tasks = cycled_tasks(samples.len(), &cfg.masks.masks());
    let scorer = Scorer::new(cfg.ssim_mode, cfg.feature_seed);
    let mut train_samples = None;
    let mut points = Vec::new();
    for &steps in &cfg.t_list {
        let mut tcfg = cfg.clone();
        tcfg.steps = steps;
        let state = family_member(
            &tcfg,
            &family.join(format!("T{steps}.ckpt")),
            &mut train_samples,
        )?;
        let started = Instant::now();
        let outputs = synthesize_tasks(
            &state.params,
            &state.pipeline,
            &samples,
            &tasks,
            cfg.sample_seed,
        )?;
        let seconds = started.elapsed().as_secs_f64();
        let report = scorer.report(&samples, &tasks, &outputs)?;
        points.push(SweepPoint {
            steps,
            psnr: mean_std(report.images.iter().map(|s| s.psnr)),
            ssim: mean_std(report.images.iter().map(|s| s.ssim)),
            seconds_per_image: seconds / tasks.len() as f64,
        });
    }
    let mut text = String::from("steps,psnr_mean,psnr_std,ssim_mean,ssim_std\n");
    let mut timing = String::from("steps,ms_per_image\n");
    for p in &points {
        let _ = writeln!(
            text,
            "{},{:.4},{:.4},{:.4},{:.4}",
            p.steps, p.psnr.0, p.psnr.1, p.ssim.0, p.ssim.1
        );
        let _ = writeln!(timing, "{},{:.3}", p.steps, p.seconds_per_image * 1e3);
    }
    let mut summary = format!("sweep over T = {:?}", cfg.t_list);
    if points.len() >= 2 {
        let x: Vec<f64> = points.iter().map(|p| p.steps as f64).collect();
        let y: Vec<f64> = points.iter().map(|p| p.seconds_per_image * 1e3).collect();
        let (slope, intercept, r2) = linear_fit(&x, &y)?;
        let _ = writeln!(
            timing,
            "# fit ms_per_image = {slope:.4} * steps + {intercept:.4}, r2 = {r2:.5}"
        );
        summary.push_str(&format!("; wall-clock fit r2 = {r2:.4}"));
    }
    write_file(&out.join("sweep.csv"), &text)?;
    write_file(&out.join("sweep_timing.csv"), &timing)?;
    Ok(summary)
}
