use std::fs;
use std::path::Path;

use tamperscope::datagen::{build_dataset, DatasetManifest, Split};
use tamperscope::metrics::evaluate;
use tamperscope::numerics::Tensor;
use tamperscope::pnm;
use tamperscope::trainer::{train as run_training, Checkpoint, FINAL_CHECKPOINT, LOG_FILE};
use tamperscope::wavelet::{dwt2, hh_energy_map};

use crate::config::CliConfig;
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn generate(c: &CliConfig) -> Result<(), CliError> {
    let cfg = c.datagen()?;
    let out = c.path("out")?;
    let manifest = build_dataset(&cfg, &out)?;
    c.echo("generate", &out)?;
    println!("{}", manifest.counts);
    println!("manifest hash {:016x}", manifest.hash());
    Ok(())
}

pub fn train(c: &CliConfig) -> Result<(), CliError> {
    let tc = c.train()?;
    let data = c.path("data")?;
    let out = c.path("out")?;
    let manifest = DatasetManifest::load(&data)?;
    let samples = manifest.load_split(Split::Train)?;
    let first = samples
        .first()
        .ok_or_else(|| CliError::Config(format!("{} has no training samples", data.display())))?;
    if first.height() != first.width() {
        return Err(CliError::Config(format!(
            "training images must be square, got {}×{}",
            first.height(),
            first.width()
        )));
    }
    let mc = c.model(first.height())?;
    create_dir(&out)?;
    c.echo("train", &out)?;
    let spe = tc.steps_per_epoch(samples.len());
    let outcome = run_training(&samples, mc, tc, Some(&out))?;
    for (i, m) in outcome.epoch_means(spe).iter().enumerate() {
        println!("epoch {} mean l_total {m:.6}", i + 1);
    }
    if let Some(last) = outcome.log.last() {
        let l = &last.loss;
        println!(
            "final step {}: l_total={:.6} l_pred={:.6} l_cl={:.6} l_t={:.6} l_cls={:.6} l_bce={:.6} l_dice={:.6}",
            last.step, l.l_total, l.l_pred, l.l_cl, l.l_t, l.l_cls, l.l_bce, l.l_dice
        );
    }
    println!("log {}", out.join(LOG_FILE).display());
    println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

pub fn eval(c: &CliConfig) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&c.path("checkpoint")?)?;
    let manifest = DatasetManifest::load(&c.path("data")?)?;
    let split = Split::parse(c.raw("split"))?;
    let dir = c.path("report")?;
    let report = evaluate(&manifest, &ckpt, split)?;
    create_dir(&dir)?;
    report.write(&dir)?;
    c.echo("eval", &dir)?;
    print!("{report}");
    Ok(())
}

pub fn predict(c: &CliConfig) -> Result<(), CliError> {
    let model = Checkpoint::load(&c.path("checkpoint")?)?.to_model()?;
    let image = pnm::read_ppm(&c.path("image")?)?;
    let out = c.path("out")?;
    let p = model.predict(&image)?;
    let (h, w, _) = image.dims3()?;
    create_dir(&out)?;
    pnm::write_mask(&out.join("mask.pgm"), &p.mask, h, w)?;
    let text = p.explanation.render();
    pnm::write_file(&out.join("explanation.txt"), format!("{text}\n").as_bytes())?;
    c.echo("predict", &out)?;
    println!("{}", p.verdict);
    println!("{text}");
    Ok(())
}

pub fn decompose(c: &CliConfig) -> Result<(), CliError> {
    let window: usize = c.get("window")?;
    let image = pnm::read_ppm(&c.path("image")?)?;
    let out = c.path("out")?;
    let bands = dwt2(&image)?;
    let energy = hh_energy_map(&bands, window)?;
    create_dir(&out)?;
    for (name, band) in ["ll", "lh", "hl", "hh"].into_iter().zip(bands.bands()) {
        let (h, w, ch) = band.dims3()?;
        let (bytes, lo, scale) = pnm::rescale_to_gray(band.data());
        let t = Tensor::new(&[h, w, ch], bytes.iter().map(|&b| b as f64 / 255.0).collect())?;
        pnm::write_ppm(&out.join(format!("{name}.ppm")), &t)?;
        println!("{name}.ppm {w}x{h} min {lo:e} scale {scale:e}");
    }
    let (h, w) = (energy.shape()[0], energy.shape()[1]);
    let (bytes, lo, scale) = pnm::rescale_to_gray(energy.data());
    pnm::write_file(&out.join("hh_energy.pgm"), &pnm::encode_pgm(&bytes, h, w)?)?;
    println!("hh_energy.pgm {w}x{h} min {lo:e} scale {scale:e}");
    c.echo("decompose", &out)?;
    Ok(())
}
